#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedsup/gradcheck.hpp"
#include "fedsup/objectives.hpp"

using namespace fedsup;

namespace {

std::vector<int32_t> random_labels(int n, int classes, uint64_t seed) {
  RngStream rng(seed);
  std::vector<int32_t> labels(n);
  for (auto& l : labels) l = static_cast<int32_t>(rng.uniform_int(classes));
  return labels;
}

Tensor<float> random_logits(Shape shape, uint64_t seed, float scale = 2.f) {
  RngStream rng(seed);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-scale, scale));
  return t;
}

}  // namespace

TEST_CASE("ce loss is zero under perfectly confident correct predictions") {
  const int B = 1, K = 3, H = 2, W = 2;
  Tensor<float> logits({B, K, H, W});
  std::vector<int32_t> labels = {0, 1, 2, 0};
  for (int p = 0; p < H * W; ++p) logits[labels[p] * H * W + p] = 50.f;
  Tape<float> tape;
  auto loss = ce_loss(tape, tape.constant(logits), labels);
  CHECK(tape.scalar_value(loss) == doctest::Approx(0.f).epsilon(1e-6));
}

TEST_CASE("ce loss of all-zero logits is log K") {
  Tensor<float> logits({2, 4, 4, 4});
  auto labels = random_labels(2 * 16, 4, 3);
  Tape<float> tape;
  auto loss = ce_loss(tape, tape.constant(logits), labels);
  CHECK(tape.scalar_value(loss) == doctest::Approx(1.386294f).epsilon(1e-6));
}

TEST_CASE("ce loss matches a scalar accumulation oracle") {
  const int B = 2, K = 3, H = 4, W = 4;
  auto logits = random_logits({B, K, H, W}, 17);
  auto labels = random_labels(B * H * W, K, 19);
  labels[5] = 255;  // one ignored pixel
  Tape<float> tape;
  auto loss = ce_loss(tape, tape.constant(logits), labels);

  double acc = 0.0;
  int64_t n = 0;
  for (int b = 0; b < B; ++b)
    for (int p = 0; p < H * W; ++p) {
      int32_t y = labels[b * H * W + p];
      if (y == 255) continue;
      double mx = -1e30;
      for (int k = 0; k < K; ++k)
        mx = std::max(mx, static_cast<double>(logits[(b * K + k) * H * W + p]));
      double denom = 0.0;
      for (int k = 0; k < K; ++k)
        denom += std::exp(static_cast<double>(logits[(b * K + k) * H * W + p]) - mx);
      double pt = std::exp(static_cast<double>(logits[(b * K + y) * H * W + p]) - mx) / denom;
      acc -= std::log(std::max(pt, 1e-12));
      ++n;
    }
  CHECK(std::abs(tape.scalar_value(loss) - acc / n) < 1e-6);
}

TEST_CASE("mi loss closed forms") {
  Tensor<float> uniform = Tensor<float>::full({1, 4, 2, 2}, 0.25f);
  std::vector<int32_t> labels = {0, 1, 2, 3};
  Tape<float> tape;
  auto loss = mi_loss(tape, tape.constant(uniform), labels);
  CHECK(tape.scalar_value(loss) == doctest::Approx(1.386294f).epsilon(1e-6));

  Tensor<float> confident({1, 2, 1, 2});
  confident[0 * 2 + 0] = 1.f;  // class 0 at pixel 0
  confident[0 * 2 + 1] = 0.f;
  confident[1 * 2 + 0] = 0.f;
  confident[1 * 2 + 1] = 1.f;  // class 1 at pixel 1
  std::vector<int32_t> l2 = {0, 1};
  Tape<float> t2;
  auto loss2 = mi_loss(t2, t2.constant(confident), l2);
  CHECK(t2.scalar_value(loss2) == doctest::Approx(0.f));
}

TEST_CASE("mi loss equals ce loss on the same distribution") {
  auto logits = random_logits({2, 5, 4, 4}, 23);
  auto labels = random_labels(2 * 16, 5, 29);
  Tape<float> tape;
  auto lv = tape.constant(logits);
  auto ce = ce_loss(tape, lv, labels);
  auto mi = mi_loss(tape, tape.softmax_channels(lv), labels);
  CHECK(std::abs(tape.scalar_value(ce) - tape.scalar_value(mi)) < 1e-6);
}

TEST_CASE("ne regularizer closed forms") {
  Tensor<float> zeros({1, 8, 2, 2});
  Tape<float> tape;
  auto r = ne_reg(tape, tape.constant(zeros));
  CHECK(tape.scalar_value(r) == doctest::Approx(-std::log(8.f)).epsilon(1e-6));

  Tensor<float> dominant({1, 4, 1, 1});
  dominant[0] = 1000.f;
  Tape<float> t2;
  auto r2 = ne_reg(t2, t2.constant(dominant));
  CHECK(t2.scalar_value(r2) <= 1e-9f);
  CHECK(t2.scalar_value(r2) > -1e-3f);

  Tensor<float> two({1, 2, 1, 1});
  two[1] = std::log(3.f);
  Tape<float> t3;
  auto r3 = ne_reg(t3, t3.constant(two));
  CHECK(t3.scalar_value(r3) == doctest::Approx(-0.562335f).epsilon(1e-5));
}

TEST_CASE("ne regularizer stays within [-log C, 0] on random inputs") {
  RngStream rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const int C = 2 + static_cast<int>(rng.uniform_int(7));
    Tensor<float> z({2, C, 4, 4});
    for (auto& v : z.data()) v = static_cast<float>(rng.normal() * 5.0);
    Tape<float> tape;
    auto r = ne_reg(tape, tape.constant(z));
    CHECK(tape.scalar_value(r) <= 1e-9f);
    CHECK(tape.scalar_value(r) >= -std::log(static_cast<float>(C)) - 1e-6f);
  }
}

TEST_CASE("ne regularizer honors a channel-prefix subset") {
  RngStream rng(37);
  Tensor<float> z({1, 6, 2, 2});
  for (auto& v : z.data()) v = static_cast<float>(rng.normal());
  Tensor<float> zp({1, 3, 2, 2});
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 4; ++p) zp[c * 4 + p] = z[c * 4 + p];
  Tape<float> t1, t2;
  auto full = ne_reg(t1, t1.constant(z), 3);
  auto manual = ne_reg(t2, t2.constant(zp));
  CHECK(t1.scalar_value(full) == doctest::Approx(t2.scalar_value(manual)));
}

TEST_CASE("scalar total combines components with the stated weights") {
  auto b = total_loss(1.0, {0.5}, {-2.0}, {{0.4}, {0.1}});
  CHECK(b.total == doctest::Approx(1.0));
  CHECK(b.ce == 1.0);

  auto zero = total_loss(0.7, {0.5, 0.2}, {-1.0, -0.5}, LossWeights::uniform(2, 0, 0));
  CHECK(zero.total == 0.7);

  CHECK_THROWS_AS(total_loss(1.0, {0.5}, {-2.0, 0.0}, {{0.4}, {0.1}}), ConfigError);
}

TEST_CASE("total is linear in alpha: doubling alpha doubles the mi contribution") {
  const double ce = 0.9, mi = 0.37, ne = -1.1;
  auto b1 = total_loss(ce, {mi}, {ne}, {{0.4}, {0.1}});
  auto b2 = total_loss(ce, {mi}, {ne}, {{0.8}, {0.1}});
  CHECK(b2.total - b1.total == doctest::Approx(0.4 * mi).epsilon(1e-12));
  CHECK((b2.total - (ce + 0.1 * ne)) == doctest::Approx(2.0 * (b1.total - (ce + 0.1 * ne))));
}

TEST_CASE("breakdown invariant: total equals ce plus weighted sums") {
  auto net = build_network<float>(2, 4, 3, 41);
  auto taps = resolve_taps({TapRule::kAfterDownsample, {}, 2, 1, TapPositionBias::kCentral});
  auto adapters = build_adapters<float>(taps, 4, 3, 41);
  auto x = random_logits({2, 2, 8, 8}, 43, 1.f);
  auto labels = random_labels(2 * 64, 3, 47);
  LossWeights w{{0.4, 0.3}, {0.1, 0.2}};

  Tape<float> tape;
  auto [logits, acts] = net.forward_with_taps(tape, tape.constant(x), taps);
  auto vars = build_total_loss(tape, logits, acts, adapters, labels, w);
  auto b = read_breakdown(tape, vars, w);
  double expect = b.ce;
  for (size_t m = 0; m < 2; ++m) expect += w.alpha[m] * b.mi[m] + w.lambda[m] * b.ne[m];
  CHECK(std::abs(b.total - expect) < 1e-6);
  CHECK(std::abs(tape.scalar_value(vars.total) - b.total) < 1e-6);
  CHECK(b.ce >= 0.0);
  for (double v : b.mi) CHECK(v >= 0.0);
  for (size_t m = 0; m < 2; ++m) {
    CHECK(b.ne[m] <= 1e-9);
    CHECK(b.ne[m] >= -std::log(4.0 * kSiteChannelMul[taps[m]]) - 1e-6);
  }
}

TEST_CASE("adapter parameters receive gradient only through the mi term") {
  auto net = build_network<double>(2, 4, 3, 51);
  auto taps = resolve_taps({TapRule::kAfterDownsample, {}, 2, 1, TapPositionBias::kCentral});
  auto adapters = build_adapters<double>(taps, 4, 3, 51);
  net.set_requires_grad(true);
  adapters.set_requires_grad(true);

  RngStream rng(53);
  Tensor<double> x({1, 2, 8, 8});
  for (auto& v : x.data()) v = rng.uniform(0.0, 1.0);
  auto labels = random_labels(64, 3, 57);

  auto run = [&](const LossWeights& w) {
    net.zero_grad();
    adapters.zero_grad();
    Tape<double> tape;
    auto [logits, acts] = net.forward_with_taps(tape, tape.constant(x), taps);
    auto vars = build_total_loss(tape, logits, acts, adapters, labels, w);
    tape.backward(vars.total);
  };

  // lambda only: adapters are not even part of the graph
  run(LossWeights::uniform(2, 0.0, 0.5));
  for (auto& p : adapters.params())
    for (double g : p.tensor.grad) CHECK(g == 0.0);

  // alpha > 0: adapters receive nonzero gradient, verified against finite differences
  LossWeights w{{0.4, 0.2}, {0.1, 0.1}};
  run(w);
  double sum_abs = 0.0;
  for (auto& p : adapters.params())
    for (double g : p.tensor.grad) sum_abs += std::abs(g);
  CHECK(sum_abs > 0.0);

  std::vector<Tensor<double>*> phi;
  for (auto& p : adapters.params()) phi.push_back(&p.tensor);
  auto f = [&]() {
    Tape<double> tape;
    auto [logits, acts] = net.forward_with_taps(tape, tape.constant(x), taps);
    auto vars = build_total_loss(tape, logits, acts, adapters, labels, w);
    return static_cast<double>(tape.scalar_value(vars.total));
  };
  auto res = finite_diff_check<double>(f, phi, 1e-5);
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("full objective gradients match finite differences in double precision") {
  auto net = build_network<double>(2, 2, 3, 61);
  auto taps = resolve_taps({TapRule::kAfterDownsample, {}, 2, 1, TapPositionBias::kCentral});
  auto adapters = build_adapters<double>(taps, 2, 3, 61);
  net.set_requires_grad(true);
  adapters.set_requires_grad(true);

  RngStream rng(63);
  Tensor<double> x({1, 2, 4, 4});
  for (auto& v : x.data()) v = rng.uniform(0.0, 1.0);
  auto labels = random_labels(16, 3, 67);
  LossWeights w{{0.4, 0.4}, {0.1, 0.1}};

  net.zero_grad();
  adapters.zero_grad();
  {
    Tape<double> tape;
    auto [logits, acts] = net.forward_with_taps(tape, tape.constant(x), taps);
    auto vars = build_total_loss(tape, logits, acts, adapters, labels, w);
    tape.backward(vars.total);
  }
  std::vector<Tensor<double>*> all;
  for (auto& p : net.params()) all.push_back(&p.tensor);
  for (auto& p : adapters.params()) all.push_back(&p.tensor);
  auto f = [&]() {
    Tape<double> tape;
    auto [logits, acts] = net.forward_with_taps(tape, tape.constant(x), taps);
    auto vars = build_total_loss(tape, logits, acts, adapters, labels, w);
    return ObjectiveSample{static_cast<double>(tape.scalar_value(vars.total)),
                           tape.branch_hash()};
  };
  auto res = finite_diff_check_branched<double>(f, all, 1e-5);
  CHECK(res.max_rel_err < 1e-5);
  // the non-differentiable exclusions must stay rare
  CHECK(res.checked > 9 * (res.checked + res.skipped) / 10);
}

TEST_CASE("larger lambda yields higher tap entropy after identical training steps") {
  // single conv layer, single tap at its output, fixed data
  RngStream drng(71);
  Tensor<float> x({2, 2, 4, 4});
  for (auto& v : x.data()) v = static_cast<float>(drng.uniform(0.0, 1.0));
  auto labels = random_labels(2 * 16, 3, 73);

  auto train_entropy = [&](double lambda) {
    RngStream rng(75);
    Tensor<float> w = Tensor<float>::randn({3, 2, 3, 3}, rng, 0.5f);
    Tensor<float> b({3});
    w.requires_grad = b.requires_grad = true;
    const float lr = 0.5f;
    for (int step = 0; step < 60; ++step) {
      w.zero_grad();
      b.zero_grad();
      Tape<float> tape;
      auto z = tape.conv2d(tape.constant(x), tape.leaf(w), tape.leaf(b), 1, 1);
      auto probs = tape.softmax_channels(z);
      auto loss = tape.masked_nll_mean(probs, labels);
      if (lambda != 0) {
        auto r = tape.plogp_mean(probs);
        loss = tape.add(loss, tape.scale(r, static_cast<float>(lambda)));
      }
      tape.backward(loss);
      for (int64_t i = 0; i < w.size(); ++i) w[i] -= lr * w.grad[i];
      for (int64_t i = 0; i < b.size(); ++i) b[i] -= lr * b.grad[i];
    }
    Tape<float> tape;
    auto z = tape.conv2d(tape.constant(x), tape.leaf(w), tape.leaf(b), 1, 1);
    auto r = tape.plogp_mean(tape.softmax_channels(z));
    return -static_cast<double>(tape.scalar_value(r));  // mean entropy
  };

  const double e0 = train_entropy(0.0);
  const double e1 = train_entropy(0.5);
  CHECK(e1 > e0);
}

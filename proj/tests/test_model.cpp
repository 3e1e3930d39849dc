#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "fedsup/model.hpp"

using namespace fedsup;

namespace {

Tensor<float> random_input(Shape shape, uint64_t seed, float scale = 1.f) {
  RngStream rng(seed);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(0.0, scale));
  return t;
}

}  // namespace

TEST_CASE("network build is deterministic per seed") {
  auto a = build_network<float>(3, 8, 4, 7);
  auto b = build_network<float>(3, 8, 4, 7);
  REQUIRE(a.params().size() == b.params().size());
  for (size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].name == b.params()[i].name);
    CHECK(std::memcmp(a.params()[i].tensor.data().data(), b.params()[i].tensor.data().data(),
                      a.params()[i].tensor.size() * sizeof(float)) == 0);
  }
  auto c = build_network<float>(3, 8, 4, 8);
  CHECK(std::memcmp(a.params()[0].tensor.data().data(), c.params()[0].tensor.data().data(),
                    a.params()[0].tensor.size() * sizeof(float)) != 0);
}

TEST_CASE("parameter count matches the hand-computed closed form") {
  auto net = build_network<float>(3, 8, 4, 7);
  // enc1 224, enc2 1168, bottleneck 4640, dec1 4624, dec2 1160, head 36
  CHECK(net.parameter_count() == 11852);
  CHECK(SegNet<float>::expected_parameter_count(3, 8, 4) == 11852);
  CHECK(net.parameter_count() == SegNet<float>::expected_parameter_count(3, 8, 4));

  auto small = build_network<float>(2, 4, 3, 1);
  CHECK(small.parameter_count() == SegNet<float>::expected_parameter_count(2, 4, 3));
}

TEST_CASE("network rejects invalid extents") {
  CHECK_THROWS_AS(build_network<float>(3, 1, 4, 7), ConfigError);
  CHECK_THROWS_AS(build_network<float>(3, 8, 1, 7), ConfigError);
  CHECK_THROWS_AS(build_network<float>(0, 8, 4, 7), ConfigError);
}

TEST_CASE("tap resolution per rule") {
  TapSpec spec;
  spec.rule = TapRule::kAfterDownsample;
  spec.count = 2;
  CHECK(resolve_taps(spec) == std::vector<int>{1, 3});
  spec.count = 1;
  CHECK(resolve_taps(spec) == std::vector<int>{1});

  TapSpec ex;
  ex.rule = TapRule::kExplicitIndices;
  ex.count = 1;
  ex.indices = {2};
  CHECK(resolve_taps(ex) == std::vector<int>{2});
  ex.count = 2;
  ex.indices = {3, 2};
  CHECK_THROWS_AS(resolve_taps(ex), ConfigError);

  TapSpec bn;
  bn.rule = TapRule::kBottleneck;
  bn.count = 1;
  CHECK(resolve_taps(bn) == std::vector<int>{4});
  bn.count = 2;
  CHECK_THROWS_WITH_AS(resolve_taps(bn), doctest::Contains("bottleneck"), ConfigError);

  TapSpec m0;
  m0.count = 0;
  CHECK(resolve_taps(m0).empty());
}

TEST_CASE("between-blocks rule honors spacing and position bias") {
  TapSpec spec;
  spec.rule = TapRule::kBetweenBlocks;
  spec.count = 2;
  spec.spacing = 1;
  spec.position_bias = TapPositionBias::kInput;
  CHECK(resolve_taps(spec) == std::vector<int>{0, 1});
  spec.position_bias = TapPositionBias::kCentral;
  CHECK(resolve_taps(spec) == std::vector<int>{2, 3});
  spec.position_bias = TapPositionBias::kOutput;
  CHECK(resolve_taps(spec) == std::vector<int>{5, 6});

  spec.spacing = 3;
  spec.position_bias = TapPositionBias::kCentral;
  CHECK(resolve_taps(spec) == std::vector<int>{1, 4});

  // spacing between adjacent resolved taps equals the multiplier
  for (int s : {1, 2, 3}) {
    TapSpec sp;
    sp.rule = TapRule::kBetweenBlocks;
    sp.count = 3;
    sp.spacing = s;
    if ((sp.count - 1) * s >= kNumTapSites) continue;
    auto taps = resolve_taps(sp);
    for (size_t i = 1; i < taps.size(); ++i) CHECK(taps[i] - taps[i - 1] == s);
  }

  spec.count = 5;
  spec.spacing = 2;
  CHECK_THROWS_WITH_AS(resolve_taps(spec), doctest::Contains("between-blocks"), ConfigError);
}

TEST_CASE("forward produces logits of the right shape and taps at reduced scales") {
  auto net = build_network<float>(3, 4, 5, 21);
  auto x = random_input({2, 3, 16, 16}, 33);
  Tape<float> tape;
  auto [logits, acts] = net.forward_with_taps(tape, tape.constant(x), {1, 3});
  CHECK(tape.shape(logits) == Shape{2, 5, 16, 16});
  REQUIRE(acts.features.size() == 2);
  CHECK(tape.shape(acts.features[0]) == Shape{2, 4, 8, 8});
  CHECK(tape.shape(acts.features[1]) == Shape{2, 8, 4, 4});
}

TEST_CASE("tap capture does not change the logits") {
  auto net = build_network<float>(3, 4, 4, 5);
  auto x = random_input({1, 3, 8, 8}, 6);
  Tape<float> plain;
  auto l0 = net.forward(plain, plain.constant(x));
  Tape<float> tapped;
  auto [l1, acts] = net.forward_with_taps(tapped, tapped.constant(x), {0, 2, 4, 6});
  REQUIRE(acts.features.size() == 4);
  CHECK(std::memcmp(plain.value(l0).data(), tapped.value(l1).data(),
                    plain.value(l0).size() * sizeof(float)) == 0);
}

TEST_CASE("forward validates input shape") {
  auto net = build_network<float>(3, 4, 4, 5);
  Tape<float> tape;
  Tensor<float> bad_chan({1, 2, 8, 8});
  CHECK_THROWS_AS(net.forward(tape, tape.constant(bad_chan)), DimensionError);
  Tensor<float> bad_size({1, 3, 6, 6});
  CHECK_THROWS_AS(net.forward(tape, tape.constant(bad_size)), DimensionError);
}

TEST_CASE("adapter with zero weights outputs the uniform distribution") {
  std::vector<int> taps = {1};
  auto adapters = build_adapters<float>(taps, 4, 4, 9);
  for (auto& p : adapters.params())
    for (auto& v : p.tensor.data()) v = 0.f;
  RngStream rng(3);
  Tensor<float> z = Tensor<float>::randn({1, 4, 4, 4}, rng);
  Tape<float> t2;
  auto out = adapters.forward(t2, 0, t2.constant(z));
  CHECK(t2.shape(out) == Shape{1, 4, 8, 8});
  for (float v : t2.value(out)) CHECK(v == doctest::Approx(0.25f));
}

TEST_CASE("adapter upsampling yields constant 2x2 blocks and valid distributions") {
  std::vector<int> taps = {1};  // half resolution, one upsampling
  auto adapters = build_adapters<float>(taps, 4, 3, 11);
  RngStream rng(12);
  Tensor<float> z({2, 4, 4, 4});
  for (auto& v : z.data()) v = static_cast<float>(rng.normal());
  Tape<float> tape;
  auto out = adapters.forward(tape, 0, tape.constant(z));
  REQUIRE(tape.shape(out) == Shape{2, 3, 8, 8});
  const auto& v = tape.value(out);
  auto at = [&](int b, int c, int h, int w) { return v[((b * 3 + c) * 8 + h) * 8 + w]; };
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 8; h += 2)
        for (int w = 0; w < 8; w += 2) {
          CHECK(at(b, c, h, w) == at(b, c, h + 1, w));
          CHECK(at(b, c, h, w) == at(b, c, h, w + 1));
          CHECK(at(b, c, h, w) == at(b, c, h + 1, w + 1));
        }
  for (int b = 0; b < 2; ++b)
    for (int h = 0; h < 8; ++h)
      for (int w = 0; w < 8; ++w) {
        float s = 0.f;
        for (int c = 0; c < 3; ++c) s += at(b, c, h, w);
        CHECK(std::abs(s - 1.f) < 1e-6f);
      }
}

TEST_CASE("adapter rejects channel mismatch") {
  std::vector<int> taps = {0};
  auto adapters = build_adapters<float>(taps, 4, 3, 2);
  Tape<float> tape;
  Tensor<float> z({1, 6, 4, 4});
  CHECK_THROWS_AS(adapters.forward(tape, 0, tape.constant(z)), DimensionError);
}

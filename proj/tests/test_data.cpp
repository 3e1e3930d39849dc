#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "fedsup/data.hpp"
#include "fedsup/errors.hpp"

using namespace fedsup;

namespace {

SceneConfig small_scene() {
  SceneConfig c;
  c.height = 16;
  c.width = 16;
  c.channels = 3;
  c.classes = 4;
  c.shapes_min = 1;
  c.shapes_max = 3;
  c.noise_stddev = 0.05f;
  return c;
}

// mean total-variation distance between per-vehicle pixel-label histograms
// and the global histogram
double label_divergence(const Dataset& data, const std::vector<std::vector<int>>& parts) {
  const int K = data.scene.classes;
  std::vector<double> global(K, 0.0);
  double total = 0;
  for (const auto& s : data.samples)
    for (uint8_t l : s.label) {
      global[l] += 1;
      total += 1;
    }
  for (auto& g : global) g /= total;
  double mean_tv = 0;
  for (const auto& part : parts) {
    std::vector<double> hist(K, 0.0);
    double n = 0;
    for (int idx : part)
      for (uint8_t l : data.samples[idx].label) {
        hist[l] += 1;
        n += 1;
      }
    double tv = 0;
    for (int k = 0; k < K; ++k) tv += std::abs(hist[k] / n - global[k]);
    mean_tv += 0.5 * tv;
  }
  return mean_tv / parts.size();
}

}  // namespace

TEST_CASE("scene with zero shapes is all background") {
  auto c = small_scene();
  c.shapes_min = c.shapes_max = 0;
  RngStream rng(1);
  auto s = generate_scene(c, rng);
  for (uint8_t l : s.label) CHECK(l == 0);
}

TEST_CASE("noise-free scene paints exact class colors") {
  auto c = small_scene();
  c.noise_stddev = 0.f;
  c.shapes_min = c.shapes_max = 1;
  RngStream rng(3);
  auto s = generate_scene(c, rng);
  const int HW = c.height * c.width;
  bool found_fg = false;
  for (int p = 0; p < HW; ++p) {
    const int cls = s.label[p];
    auto color = c.class_color(cls);
    for (int ch = 0; ch < c.channels; ++ch)
      CHECK(s.image[ch * HW + p] == doctest::Approx(color[ch]));
    if (cls != 0) found_fg = true;
  }
  CHECK(found_fg);
}

TEST_CASE("image values stay in the unit interval") {
  auto c = small_scene();
  c.noise_stddev = 0.8f;
  RngStream rng(5);
  auto s = generate_scene(c, rng);
  for (float v : s.image) {
    CHECK(v >= 0.f);
    CHECK(v <= 1.f);
  }
}

TEST_CASE("generation is reproducible bit for bit under a fixed seed") {
  auto c = small_scene();
  RngStream r1(7), r2(7);
  auto a = generate_dataset(c, 50, r1);
  auto b = generate_dataset(c, 50, r2);
  std::vector<int64_t> hist_a(c.classes, 0), hist_b(c.classes, 0);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(std::memcmp(a.samples[i].image.data(), b.samples[i].image.data(),
                      a.samples[i].image.size() * sizeof(float)) == 0);
    CHECK(a.samples[i].label == b.samples[i].label);
    for (uint8_t l : a.samples[i].label) ++hist_a[l];
    for (uint8_t l : b.samples[i].label) ++hist_b[l];
  }
  CHECK(hist_a == hist_b);
}

TEST_CASE("dominant class ignores background and breaks ties low") {
  SegSample s;
  s.label = {0, 0, 2, 2, 1, 1, 3};
  CHECK(dominant_class(s, 4) == 1);
  SegSample bg;
  bg.label = {0, 0, 0};
  CHECK(dominant_class(bg, 4) == 0);
}

TEST_CASE("partition is exhaustive and disjoint for any settings") {
  auto c = small_scene();
  RngStream drng(11);
  auto data = generate_dataset(c, 120, drng);
  for (double gamma : {0.1, 1.0, 100.0}) {
    for (int n : {2, 5, 8}) {
      PartitionSpec spec{n, gamma, 2};
      RngStream prng(static_cast<uint64_t>(gamma * 1000) + n);
      auto parts = dirichlet_partition(data, spec, prng);
      REQUIRE(static_cast<int>(parts.size()) == n);
      std::set<int> seen;
      size_t total = 0;
      for (const auto& p : parts) {
        CHECK(p.size() >= 2);
        total += p.size();
        for (int idx : p) CHECK(seen.insert(idx).second);  // disjoint
      }
      CHECK(total == data.size());  // exhaustive
    }
  }
}

TEST_CASE("near-IID concentration matches the global histogram within 10 percent") {
  auto c = small_scene();
  RngStream drng(13);
  auto data = generate_dataset(c, 400, drng);

  const int K = c.classes;
  std::vector<double> global(K, 0.0);
  for (const auto& s : data.samples) ++global[dominant_class(s, K)];
  for (auto& g : global) g /= data.size();

  PartitionSpec spec{4, 1e6, 10};
  RngStream prng(17);
  auto parts = dirichlet_partition(data, spec, prng);
  for (const auto& part : parts) {
    std::vector<double> hist(K, 0.0);
    for (int idx : part) ++hist[dominant_class(data.samples[idx], K)];
    for (auto& h : hist) h /= part.size();
    for (int k = 0; k < K; ++k)
      if (global[k] > 0.05)  // relative comparison needs mass
        CHECK(std::abs(hist[k] - global[k]) / global[k] < 0.1);
  }
}

TEST_CASE("low concentration produces strong dominant-class skew") {
  auto c = small_scene();
  RngStream drng(19);
  auto data = generate_dataset(c, 400, drng);
  const int K = c.classes;

  std::vector<double> max_shares;
  for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    PartitionSpec spec{8, 0.1, 4};
    RngStream prng(seed);
    auto parts = dirichlet_partition(data, spec, prng);
    double best = 0;
    for (const auto& part : parts) {
      std::vector<double> hist(K, 0.0);
      for (int idx : part) ++hist[dominant_class(data.samples[idx], K)];
      const double share = *std::max_element(hist.begin(), hist.end()) / part.size();
      best = std::max(best, share);
    }
    max_shares.push_back(best);
  }
  std::sort(max_shares.begin(), max_shares.end());
  CHECK(max_shares[2] >= 0.6);  // median over 5 seeds
}

TEST_CASE("label divergence decreases as concentration grows") {
  auto c = small_scene();
  RngStream drng(23);
  auto data = generate_dataset(c, 400, drng);
  const std::vector<double> gammas = {0.1, 1.0, 10.0, 1e6};
  std::vector<double> medians;
  for (double gamma : gammas) {
    std::vector<double> divs;
    for (uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
      PartitionSpec spec{8, gamma, 4};
      RngStream prng(seed);
      divs.push_back(label_divergence(data, dirichlet_partition(data, spec, prng)));
    }
    std::sort(divs.begin(), divs.end());
    medians.push_back(divs[2]);
  }
  for (size_t i = 1; i < medians.size(); ++i) CHECK(medians[i] <= medians[i - 1] + 1e-12);
}

TEST_CASE("infeasible minimum is rejected") {
  auto c = small_scene();
  RngStream drng(29);
  auto data = generate_dataset(c, 10, drng);
  PartitionSpec spec{4, 1.0, 5};
  RngStream prng(31);
  CHECK_THROWS_AS(dirichlet_partition(data, spec, prng), ConfigError);
}

TEST_CASE("dataset file round trip is bit exact") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "fedsup_data_test";
  fs::create_directories(dir);
  const auto path = (dir / "train.fsd").string();

  auto c = small_scene();
  RngStream rng(37);
  auto data = generate_dataset(c, 25, rng);
  save_dataset(path, data);
  auto loaded = load_dataset(path);
  REQUIRE(loaded.size() == data.size());
  CHECK(loaded.scene.classes == c.classes);
  CHECK(loaded.scene.height == c.height);
  for (size_t i = 0; i < data.size(); ++i) {
    CHECK(std::memcmp(loaded.samples[i].image.data(), data.samples[i].image.data(),
                      data.samples[i].image.size() * sizeof(float)) == 0);
    CHECK(loaded.samples[i].label == data.samples[i].label);
  }
}

TEST_CASE("dataset loader rejects truncation and version skew") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "fedsup_data_test";
  fs::create_directories(dir);
  const auto path = (dir / "broken.fsd").string();

  auto c = small_scene();
  RngStream rng(41);
  auto data = generate_dataset(c, 5, rng);
  save_dataset(path, data);
  auto bytes = [&] {
    std::ifstream is(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  }();

  {
    std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("truncated"), FormatError);
  }
  {
    auto corrupt = bytes;
    corrupt[8] = 42;
    std::ofstream(path, std::ios::binary) << corrupt;
    CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("unsupported dataset version"),
                         FormatError);
  }
}

TEST_CASE("batch assembly converts precision and flattens labels") {
  auto c = small_scene();
  RngStream rng(43);
  auto data = generate_dataset(c, 4, rng);
  std::vector<int> order = {2, 0, 3, 1};
  auto [images, labels] = make_batch<double>(data, order, 1, 2);
  CHECK(images.shape() == Shape{2, 3, 16, 16});
  CHECK(labels.size() == 2u * 256);
  CHECK(images[0] == doctest::Approx(static_cast<double>(data.samples[0].image[0])));
  CHECK(labels[0] == data.samples[0].label[0]);
  CHECK(labels[256] == data.samples[3].label[0]);
}

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fedsup/rng.hpp"
#include "fedsup/tensor.hpp"

namespace fedsup {

// One synthetic scene: image channels in [0,1], per-pixel class labels.
struct SegSample {
  std::vector<float> image;   // [channels, H, W] row-major
  std::vector<uint8_t> label; // [H, W]
};

struct SceneConfig {
  int height = 16;
  int width = 16;
  int channels = 3;
  int classes = 4;
  int shapes_min = 1;
  int shapes_max = 3;
  float noise_stddev = 0.05f;
  // One color per class, `channels` floats each. Empty = procedural palette.
  std::vector<std::vector<float>> palette;

  void validate() const;
  // Palette entry for class k (procedural when none was configured).
  std::vector<float> class_color(int k) const;
};

struct Dataset {
  SceneConfig scene;
  std::vector<SegSample> samples;

  size_t size() const { return samples.size(); }
};

struct PartitionSpec {
  int vehicles = 4;
  double gamma = 0.3;       // Dirichlet concentration
  int min_per_vehicle = 1;

  void validate() const;
};

// Background class 0 plus randomly placed rectangles and discs of classes
// 1..K-1; the image is the per-class base color plus Gaussian noise, clamped
// to [0,1]; the label is the exact painted mask.
SegSample generate_scene(const SceneConfig& config, RngStream& rng);

Dataset generate_dataset(const SceneConfig& config, size_t count, RngStream& rng);

// Most frequent foreground class of a sample (ties break low); background 0
// only when the sample has no foreground pixels at all.
int dominant_class(const SegSample& sample, int classes);

// Label-skewed split: for every dominant class, vehicle shares are drawn from
// Dirichlet(gamma) and samples are assigned accordingly. Exhaustive and
// disjoint; vehicles below the minimum are topped up from the largest vehicle.
std::vector<std::vector<int>> dirichlet_partition(const Dataset& dataset,
                                                  const PartitionSpec& spec, RngStream& rng);

void save_dataset(const std::string& path, const Dataset& dataset);
Dataset load_dataset(const std::string& path);

// Assembles a [B, channels, H, W] image tensor and flat label vector from the
// given sample indices, converting to the requested precision.
template <typename T>
std::pair<Tensor<T>, std::vector<int32_t>> make_batch(const Dataset& data,
                                                      const std::vector<int>& indices,
                                                      size_t first, size_t count) {
  const auto& sc = data.scene;
  const int64_t pixels = static_cast<int64_t>(sc.height) * sc.width;
  const int64_t per_image = static_cast<int64_t>(sc.channels) * pixels;
  Tensor<T> images({static_cast<int>(count), sc.channels, sc.height, sc.width});
  std::vector<int32_t> labels(count * pixels);
  for (size_t i = 0; i < count; ++i) {
    const SegSample& s = data.samples[indices[first + i]];
    for (int64_t j = 0; j < per_image; ++j)
      images[i * per_image + j] = static_cast<T>(s.image[j]);
    for (int64_t j = 0; j < pixels; ++j)
      labels[i * pixels + j] = static_cast<int32_t>(s.label[j]);
  }
  return {std::move(images), std::move(labels)};
}

}  // namespace fedsup

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsup/tape.hpp"
#include "fedsup/tensor.hpp"

namespace fedsup {

// Encoder-decoder block layout. Tap sites are the boundaries after each named
// block, indexed 0..6; the classification head output is not a tap site.
//
//   block 0  enc1        conv3x3 Cin->C, relu          full res
//   block 1  pool1       maxpool2x2                    1/2 res
//   block 2  enc2        conv3x3 C->2C, relu           1/2 res
//   block 3  pool2       maxpool2x2                    1/4 res
//   block 4  bottleneck  conv3x3 2C->4C, relu          1/4 res
//   block 5  up1+dec1    upsample2x, conv3x3 4C->2C    1/2 res
//   block 6  up2+dec2    upsample2x, conv3x3 2C->C     full res
//   head     conv1x1 C->K
inline constexpr int kNumTapSites = 7;

// Channel multiple (of the base width) at each tap site.
inline constexpr int kSiteChannelMul[kNumTapSites] = {1, 1, 2, 2, 4, 2, 1};
// Number of 2x upsamplings needed to reach full resolution from each site.
inline constexpr int kSiteUpsamplings[kNumTapSites] = {0, 1, 1, 2, 2, 1, 0};

enum class TapRule { kAfterDownsample, kBetweenBlocks, kBottleneck, kExplicitIndices };
enum class TapPositionBias { kInput, kCentral, kOutput };

struct TapSpec {
  TapRule rule = TapRule::kAfterDownsample;
  std::vector<int> indices;  // used by kExplicitIndices
  int count = 0;             // M
  int spacing = 1;           // block boundaries between adjacent taps
  TapPositionBias position_bias = TapPositionBias::kCentral;
};

inline const char* tap_rule_name(TapRule r) {
  switch (r) {
    case TapRule::kAfterDownsample: return "after-downsample";
    case TapRule::kBetweenBlocks: return "between-blocks";
    case TapRule::kBottleneck: return "bottleneck";
    case TapRule::kExplicitIndices: return "explicit-indices";
  }
  return "?";
}

template <typename T>
struct TapActivations {
  std::vector<Var> features;  // one per resolved tap, in site order
};

// The segmentation network. Parameters are held in a flat named set so
// federation, checkpoints and updates can treat them uniformly.
template <typename T>
class SegNet {
 public:
  SegNet() = default;

  SegNet(int in_channels, int width, int classes, RngStream rng)
      : in_channels_(in_channels), width_(width), classes_(classes) {
    if (width < 2) throw ConfigError("network width must be at least 2, got " + std::to_string(width));
    if (classes < 2) throw ConfigError("class count must be at least 2, got " + std::to_string(classes));
    if (in_channels < 1) throw ConfigError("input channels must be positive");
    add_conv("enc1", in_channels, width, 3, rng);
    add_conv("enc2", width, 2 * width, 3, rng);
    add_conv("bottleneck", 2 * width, 4 * width, 3, rng);
    add_conv("dec1", 4 * width, 2 * width, 3, rng);
    add_conv("dec2", 2 * width, width, 3, rng);
    add_conv("head", width, classes, 1, rng);
  }

  int in_channels() const { return in_channels_; }
  int width() const { return width_; }
  int classes() const { return classes_; }

  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  int64_t parameter_count() const { return param_count(params_); }

  // Closed form for the layout above: five 3x3 convs plus the 1x1 head.
  static int64_t expected_parameter_count(int cin, int width, int classes) {
    int64_t c = width;
    int64_t conv = 9 * (cin * c + c * 2 * c + 2 * c * 4 * c + 4 * c * 2 * c + 2 * c * c);
    int64_t bias = c + 2 * c + 4 * c + 2 * c + c;
    int64_t head = c * classes + classes;
    return conv + bias + head;
  }

  void set_requires_grad(bool on) {
    for (auto& p : params_) p.tensor.requires_grad = on;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Forward pass capturing the activations at the requested tap sites.
  // Capturing is pure: the logits do not depend on which sites are tapped.
  std::pair<Var, TapActivations<T>> forward_with_taps(Tape<T>& tape, Var x,
                                                      const std::vector<int>& taps) {
    const Shape& xs = tape.shape(x);
    if (xs.size() != 4 || xs[1] != in_channels_)
      throw DimensionError("network input must be [B," + std::to_string(in_channels_) +
                           ",H,W], got " + shape_str(xs));
    if (xs[2] % 4 != 0 || xs[3] % 4 != 0)
      throw DimensionError("input spatial extents must be divisible by 4, got " + shape_str(xs));

    std::array<Var, kNumTapSites> site;
    site[0] = tape.relu(conv(tape, x, 0, 1));                       // enc1
    site[1] = tape.maxpool2x2(site[0]);                             // pool1
    site[2] = tape.relu(conv(tape, site[1], 1, 1));                 // enc2
    site[3] = tape.maxpool2x2(site[2]);                             // pool2
    site[4] = tape.relu(conv(tape, site[3], 2, 1));                 // bottleneck
    site[5] = tape.relu(conv(tape, tape.upsample_nearest2x(site[4]), 3, 1));  // up1+dec1
    site[6] = tape.relu(conv(tape, tape.upsample_nearest2x(site[5]), 4, 1));  // up2+dec2
    Var logits = conv(tape, site[6], 5, 0);                         // head

    TapActivations<T> acts;
    for (int t : taps) {
      if (t < 0 || t >= kNumTapSites)
        throw ContractError("tap site " + std::to_string(t) + " out of range");
      acts.features.push_back(site[t]);
    }
    return {logits, acts};
  }

  Var forward(Tape<T>& tape, Var x) { return forward_with_taps(tape, x, {}).first; }

 private:
  Var conv(Tape<T>& tape, Var x, int layer, int pad) {
    Var w = tape.leaf(params_[2 * layer].tensor);
    Var b = tape.leaf(params_[2 * layer + 1].tensor);
    return tape.conv2d(x, w, b, 1, pad);
  }

  void add_conv(const std::string& name, int cin, int cout, int k, RngStream& rng) {
    // He fan-in initialization
    const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    Tensor<T> w = Tensor<T>::randn({cout, cin, k, k}, rng, static_cast<T>(stddev));
    params_.push_back({name + ".weight", std::move(w)});
    params_.push_back({name + ".bias", Tensor<T>({cout})});
  }

  int in_channels_ = 0;
  int width_ = 0;
  int classes_ = 0;
  ParamSet<T> params_;
};

template <typename T>
SegNet<T> build_network(int in_channels, int width, int classes, uint64_t seed) {
  return SegNet<T>(in_channels, width, classes, RngStream(seed).fork({0x6e6574}));  // "net"
}

// Maps a TapSpec to concrete site indices for the fixed block layout above.
// Deterministic; strictly increasing; throws ConfigError when the rule cannot
// produce the requested count.
inline std::vector<int> resolve_taps(const TapSpec& spec) {
  if (spec.count < 0) throw ConfigError("tap count must be nonnegative");
  if (spec.count == 0) return {};
  if (spec.spacing < 1 || spec.spacing > 3)
    throw ConfigError("tap spacing must be in {1,2,3}, got " + std::to_string(spec.spacing));

  auto fail = [&](int available) {
    throw ConfigError(std::string("tap rule ") + tap_rule_name(spec.rule) + " offers " +
                      std::to_string(available) + " site(s) but " + std::to_string(spec.count) +
                      " were requested");
  };

  switch (spec.rule) {
    case TapRule::kAfterDownsample: {
      std::vector<int> sites = {1, 3};  // after pool1, after pool2
      if (spec.count > static_cast<int>(sites.size())) fail(static_cast<int>(sites.size()));
      sites.resize(spec.count);
      return sites;
    }
    case TapRule::kBottleneck: {
      if (spec.count > 1) fail(1);
      return {4};
    }
    case TapRule::kExplicitIndices: {
      if (static_cast<int>(spec.indices.size()) != spec.count)
        throw ConfigError("explicit-indices: index list length " +
                          std::to_string(spec.indices.size()) + " does not match count " +
                          std::to_string(spec.count));
      std::vector<int> sites = spec.indices;
      for (size_t i = 0; i < sites.size(); ++i) {
        if (sites[i] < 0 || sites[i] >= kNumTapSites)
          throw ConfigError("explicit tap index " + std::to_string(sites[i]) +
                            " outside [0," + std::to_string(kNumTapSites) + ")");
        if (i > 0 && sites[i] <= sites[i - 1])
          throw ConfigError("explicit tap indices must be strictly increasing");
      }
      return sites;
    }
    case TapRule::kBetweenBlocks: {
      const int span = (spec.count - 1) * spec.spacing;
      if (span >= kNumTapSites) {
        int max_count = (kNumTapSites - 1) / spec.spacing + 1;
        fail(max_count);
      }
      int start = 0;
      switch (spec.position_bias) {
        case TapPositionBias::kInput: start = 0; break;
        case TapPositionBias::kCentral: start = (kNumTapSites - 1 - span) / 2; break;
        case TapPositionBias::kOutput: start = kNumTapSites - 1 - span; break;
      }
      std::vector<int> sites(spec.count);
      for (int i = 0; i < spec.count; ++i) sites[i] = start + i * spec.spacing;
      return sites;
    }
  }
  throw ConfigError("unknown tap rule");
}

// Per-tap resolution adapter: 1x1 conv from the tap's channels to K classes,
// nearest-neighbor upsampling back to full resolution, then channel softmax.
template <typename T>
class AdapterStack {
 public:
  AdapterStack() = default;

  // ne_channels == 0 means "use all channels at each tap".
  AdapterStack(const std::vector<int>& taps, int width, int classes, RngStream rng) {
    taps_ = taps;
    classes_ = classes;
    for (size_t m = 0; m < taps_.size(); ++m) {
      const int cm = kSiteChannelMul[taps_[m]] * width;
      const double stddev = std::sqrt(2.0 / static_cast<double>(cm));
      const std::string base = "tap" + std::to_string(m);
      params_.push_back(
          {base + ".weight", Tensor<T>::randn({classes, cm, 1, 1}, rng, static_cast<T>(stddev))});
      params_.push_back({base + ".bias", Tensor<T>({classes})});
      upsamplings_.push_back(kSiteUpsamplings[taps_[m]]);
    }
  }

  size_t tap_count() const { return taps_.size(); }
  const std::vector<int>& taps() const { return taps_; }

  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  void set_requires_grad(bool on) {
    for (auto& p : params_) p.tensor.requires_grad = on;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Full-resolution per-pixel class probabilities for tap m.
  Var forward(Tape<T>& tape, size_t m, Var z) {
    if (m >= taps_.size()) throw ContractError("adapter index out of range");
    const Shape& zs = tape.shape(z);
    const Shape& ws = params_[2 * m].tensor.shape();
    if (zs.size() != 4 || zs[1] != ws[1])
      throw DimensionError("adapter " + std::to_string(m) + " expects " + std::to_string(ws[1]) +
                           " channels, got " + shape_str(zs));
    Var w = tape.leaf(params_[2 * m].tensor);
    Var b = tape.leaf(params_[2 * m + 1].tensor);
    Var h = tape.conv2d(z, w, b, 1, 0);
    for (int u = 0; u < upsamplings_[m]; ++u) h = tape.upsample_nearest2x(h);
    return tape.softmax_channels(h);
  }

 private:
  std::vector<int> taps_;
  std::vector<int> upsamplings_;
  int classes_ = 0;
  ParamSet<T> params_;
};

template <typename T>
AdapterStack<T> build_adapters(const std::vector<int>& taps, int width, int classes,
                               uint64_t seed) {
  return AdapterStack<T>(taps, width, classes, RngStream(seed).fork({0x616461}));  // "ada"
}

}  // namespace fedsup

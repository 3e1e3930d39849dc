#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fedsup/errors.hpp"
#include "fedsup/tensor.hpp"

namespace fedsup {

inline constexpr int32_t kIgnoreLabel = 255;

// Pixel confusion counts; entry (a,b) = pixels of true class a predicted b.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes) : classes_(classes), counts_(classes * classes, 0) {
    if (classes < 2) throw ContractError("confusion matrix needs at least 2 classes");
  }

  int classes() const { return classes_; }
  uint64_t at(int truth, int predicted) const { return counts_[truth * classes_ + predicted]; }
  uint64_t& at(int truth, int predicted) { return counts_[truth * classes_ + predicted]; }

  uint64_t total() const {
    uint64_t t = 0;
    for (uint64_t c : counts_) t += c;
    return t;
  }

  // Accumulates counts; ignore-labeled pixels are skipped.
  void update(std::span<const int32_t> predictions, std::span<const int32_t> labels);

 private:
  int classes_;
  std::vector<uint64_t> counts_;
};

struct Metrics {
  double miou = 0.0;
  double mf1 = 0.0;
  double mpre = 0.0;
  double mrec = 0.0;
};

// Class-mean IoU / F1 / precision / recall as percentages. Classes absent from
// both truth and prediction are excluded from the means.
Metrics compute_metrics(const ConfusionMatrix& cm);

// Per-pixel argmax over the channel axis of a [B,K,H,W] tensor.
template <typename T>
std::vector<int32_t> argmax_channels(const Tensor<T>& logits) {
  const Shape& s = logits.shape();
  if (s.size() != 4) throw DimensionError("argmax_channels: input must be [B,K,H,W]");
  const int B = s[0], K = s[1];
  const int64_t plane = static_cast<int64_t>(s[2]) * s[3];
  std::vector<int32_t> out(static_cast<size_t>(B) * plane);
  for (int b = 0; b < B; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      int best = 0;
      T bv = logits[(static_cast<int64_t>(b) * K) * plane + p];
      for (int k = 1; k < K; ++k) {
        T v = logits[(static_cast<int64_t>(b) * K + k) * plane + p];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[b * plane + p] = best;
    }
  return out;
}

// Inputs to the convergence bound; gradient statistics are measured estimates,
// the remaining constants are user-supplied.
struct BoundInputs {
  double delta = 0.0;         // initial optimality gap estimate
  double eta = 0.0;           // base step size
  double rounds = 0.0;        // T
  double local_epochs = 1.0;  // E
  double drift_constant = 1.0;  // c
  double l_max = 1.0;         // largest smoothness constant
  double g_total_sq = 0.0;    // composite squared gradient bound
  double sigma_total_sq = 0.0;  // composite gradient variance
  double grad_norm_sq = 0.0;  // ||grad L||^2 at the probe point
  double heterogeneity = 0.0;  // H
};

struct BoundReport {
  double initial_gap_term = 0.0;  // 2*delta / (eta*sqrt(T))
  double variance_term = 0.0;     // l_max*eta/sqrt(T) * (G^2 + sigma^2)
  double drift_envelope = 0.0;    // c * E^2 * (grad_norm_sq + H)
  double drift_term = 0.0;        // l_max*eta/sqrt(T) * drift_envelope
  double total = 0.0;
};

BoundReport theorem1_bound(const BoundInputs& in);

struct TrendFit {
  double slope = 0.0;
  double residual = 0.0;  // root-mean-square residual of the log-log fit
  int points = 0;
};

// Least-squares slope of log(value) against log(round) over the trailing
// `window` entries (0 = all). Values must be positive; rounds start at 1.
TrendFit convergence_trend(const std::vector<double>& per_round_values, int window = 0);

// Measured per-component gradient statistics for one vehicle: the component
// order is CE, MI_1..MI_M, NE_1..NE_M.
struct GradientStats {
  std::vector<double> max_norm;  // G_s estimates
  std::vector<double> variance;  // sigma_s^2 estimates (variance of norms)
};

// Composite constants of the aggregated objective:
//   G^2     = sum_n w_n ( G_CE^2 + sum_m ( a_m^2 G_MI^2 + l_m^2 G_NE^2 ) )
//   sigma^2 = likewise over the variance estimates.
std::pair<double, double> composite_constants(const std::vector<GradientStats>& per_vehicle,
                                              const std::vector<double>& weights,
                                              const std::vector<double>& alpha,
                                              const std::vector<double>& lambda);

}  // namespace fedsup

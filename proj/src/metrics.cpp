#include "fedsup/metrics.hpp"

#include <cmath>
#include <string>

namespace fedsup {

void ConfusionMatrix::update(std::span<const int32_t> predictions,
                             std::span<const int32_t> labels) {
  if (predictions.size() != labels.size())
    throw DimensionError("confusion update: " + std::to_string(predictions.size()) +
                         " predictions vs " + std::to_string(labels.size()) + " labels");
  for (size_t i = 0; i < labels.size(); ++i) {
    const int32_t t = labels[i];
    if (t == kIgnoreLabel) continue;
    const int32_t p = predictions[i];
    if (t < 0 || t >= classes_)
      throw DataError("true class " + std::to_string(t) + " out of range at pixel " +
                      std::to_string(i));
    if (p < 0 || p >= classes_)
      throw DataError("predicted class " + std::to_string(p) + " out of range at pixel " +
                      std::to_string(i));
    ++counts_[t * classes_ + p];
  }
}

Metrics compute_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ContractError("compute_metrics on an empty confusion matrix");
  const int K = cm.classes();
  std::vector<uint64_t> row(K, 0), col(K, 0);
  for (int a = 0; a < K; ++a)
    for (int b = 0; b < K; ++b) {
      row[a] += cm.at(a, b);
      col[b] += cm.at(a, b);
    }
  double iou = 0, f1 = 0, pre = 0, rec = 0;
  int present = 0;
  for (int k = 0; k < K; ++k) {
    const double tp = static_cast<double>(cm.at(k, k));
    const double fp = static_cast<double>(col[k]) - tp;
    const double fn = static_cast<double>(row[k]) - tp;
    if (tp + fp + fn == 0) continue;  // absent from truth and prediction
    ++present;
    iou += tp / (tp + fp + fn);
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    pre += p;
    rec += r;
    f1 += p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  Metrics m;
  m.miou = 100.0 * iou / present;
  m.mf1 = 100.0 * f1 / present;
  m.mpre = 100.0 * pre / present;
  m.mrec = 100.0 * rec / present;
  return m;
}

BoundReport theorem1_bound(const BoundInputs& in) {
  if (in.eta <= 0 || in.rounds <= 0)
    throw ContractError("theorem1_bound: eta and T must be positive");
  for (double v : {in.delta, in.local_epochs, in.drift_constant, in.l_max, in.g_total_sq,
                   in.sigma_total_sq, in.grad_norm_sq, in.heterogeneity})
    if (v < 0) throw ContractError("theorem1_bound: inputs must be nonnegative");
  const double rsqrt = 1.0 / std::sqrt(in.rounds);
  BoundReport r;
  r.initial_gap_term = 2.0 * in.delta / in.eta * rsqrt;
  r.variance_term = in.l_max * in.eta * rsqrt * (in.g_total_sq + in.sigma_total_sq);
  r.drift_envelope =
      in.drift_constant * in.local_epochs * in.local_epochs * (in.grad_norm_sq + in.heterogeneity);
  r.drift_term = in.l_max * in.eta * rsqrt * r.drift_envelope;
  r.total = r.initial_gap_term + r.variance_term + r.drift_term;
  return r;
}

TrendFit convergence_trend(const std::vector<double>& per_round_values, int window) {
  const int n = static_cast<int>(per_round_values.size());
  if (n < 10) throw ContractError("convergence_trend needs at least 10 logged rounds, got " +
                                  std::to_string(n));
  int first = 0;
  if (window > 0 && window < n) first = n - window;
  const int m = n - first;
  if (m < 2) throw ContractError("convergence_trend window too small");

  double sx = 0, sy = 0;
  std::vector<double> xs(m), ys(m);
  for (int i = 0; i < m; ++i) {
    xs[i] = std::log(static_cast<double>(first + i + 1));
    ys[i] = std::log(std::max(per_round_values[first + i], 1e-300));
    sx += xs[i];
    sy += ys[i];
  }
  const double mx = sx / m, my = sy / m;
  double sxx = 0, sxy = 0;
  for (int i = 0; i < m; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  TrendFit fit;
  fit.points = m;
  fit.slope = sxx > 0 ? sxy / sxx : 0.0;
  double ss = 0;
  for (int i = 0; i < m; ++i) {
    const double r = ys[i] - (my + fit.slope * (xs[i] - mx));
    ss += r * r;
  }
  fit.residual = std::sqrt(ss / m);
  return fit;
}

std::pair<double, double> composite_constants(const std::vector<GradientStats>& per_vehicle,
                                              const std::vector<double>& weights,
                                              const std::vector<double>& alpha,
                                              const std::vector<double>& lambda) {
  if (per_vehicle.size() != weights.size())
    throw ContractError("composite_constants: one weight per vehicle required");
  if (alpha.size() != lambda.size())
    throw ContractError("composite_constants: alpha/lambda length mismatch");
  const size_t M = alpha.size();
  double g_sq = 0, sigma_sq = 0;
  for (size_t n = 0; n < per_vehicle.size(); ++n) {
    const auto& s = per_vehicle[n];
    if (s.max_norm.size() != 1 + 2 * M || s.variance.size() != 1 + 2 * M)
      throw ContractError("composite_constants: vehicle " + std::to_string(n) + " has " +
                          std::to_string(s.max_norm.size()) + " components, expected " +
                          std::to_string(1 + 2 * M));
    double g = s.max_norm[0] * s.max_norm[0];
    double v = s.variance[0];
    for (size_t m = 0; m < M; ++m) {
      g += alpha[m] * alpha[m] * s.max_norm[1 + m] * s.max_norm[1 + m];
      g += lambda[m] * lambda[m] * s.max_norm[1 + M + m] * s.max_norm[1 + M + m];
      v += alpha[m] * alpha[m] * s.variance[1 + m];
      v += lambda[m] * lambda[m] * s.variance[1 + M + m];
    }
    g_sq += weights[n] * g;
    sigma_sq += weights[n] * v;
  }
  return {g_sq, sigma_sq};
}

}  // namespace fedsup

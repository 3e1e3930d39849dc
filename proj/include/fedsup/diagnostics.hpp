#pragma once

#include <cmath>
#include <vector>

#include "fedsup/data.hpp"
#include "fedsup/metrics.hpp"
#include "fedsup/model.hpp"
#include "fedsup/objectives.hpp"

namespace fedsup {

struct HeterogeneityReport {
  std::vector<double> deviation_sq;  // per vehicle, ||grad_n - grad||^2
  double heterogeneity = 0.0;        // H, the weighted sum of deviations
  double grad_norm_sq = 0.0;         // ||grad of the aggregated objective||^2
};

// Full-batch gradient of the local objective with respect to the model
// parameters (adapters excluded), flattened in parameter order. Evaluated in
// chunks; sample-count weighting is exact because every image contributes the
// same pixel count. The passed network and adapters are restored untouched
// (gradients cleared), so probing never perturbs training state.
template <typename T>
std::vector<double> full_batch_model_gradient(SegNet<T>& net, AdapterStack<T>& adapters,
                                              const Dataset& data,
                                              const std::vector<int>& indices,
                                              const std::vector<int>& taps,
                                              const LossWeights& weights, int ne_channels = 0,
                                              int chunk = 64) {
  if (indices.empty()) throw ContractError("gradient probe on an empty dataset");
  net.set_requires_grad(true);
  adapters.set_requires_grad(true);
  std::vector<double> grad;
  grad.assign(static_cast<size_t>(net.parameter_count()), 0.0);
  const size_t total = indices.size();
  for (size_t first = 0; first < total; first += chunk) {
    const size_t count = std::min(static_cast<size_t>(chunk), total - first);
    net.zero_grad();
    adapters.zero_grad();
    auto [images, labels] = make_batch<T>(data, indices, first, count);
    Tape<T> tape;
    auto [logits, acts] = net.forward_with_taps(tape, tape.constant(images), taps);
    auto vars = build_total_loss(tape, logits, acts, adapters, labels, weights, ne_channels);
    tape.backward(vars.total);
    const double w = static_cast<double>(count) / static_cast<double>(total);
    size_t at = 0;
    for (const auto& p : net.params())
      for (T g : p.tensor.grad) grad[at++] += w * static_cast<double>(g);
  }
  net.zero_grad();
  adapters.zero_grad();
  return grad;
}

// H = sum_n w_n ||grad_n(theta) - grad(theta)||^2 with full-batch per-vehicle
// gradients all taken at the same shared parameters.
template <typename T>
HeterogeneityReport heterogeneity(SegNet<T>& net, AdapterStack<T>& adapters, const Dataset& data,
                                  const std::vector<std::vector<int>>& vehicle_indices,
                                  const std::vector<double>& vehicle_weights,
                                  const std::vector<int>& taps, const LossWeights& weights,
                                  int ne_channels = 0) {
  if (vehicle_indices.size() != vehicle_weights.size())
    throw ContractError("heterogeneity: one weight per vehicle required");
  const size_t N = vehicle_indices.size();
  std::vector<std::vector<double>> grads(N);
  for (size_t n = 0; n < N; ++n)
    grads[n] = full_batch_model_gradient(net, adapters, data, vehicle_indices[n], taps, weights,
                                         ne_channels);
  const size_t dim = grads.empty() ? 0 : grads[0].size();
  std::vector<double> mean(dim, 0.0);
  for (size_t n = 0; n < N; ++n)
    for (size_t i = 0; i < dim; ++i) mean[i] += vehicle_weights[n] * grads[n][i];

  HeterogeneityReport report;
  report.deviation_sq.resize(N, 0.0);
  for (size_t n = 0; n < N; ++n) {
    double d = 0.0;
    for (size_t i = 0; i < dim; ++i) {
      const double delta = grads[n][i] - mean[i];
      d += delta * delta;
    }
    report.deviation_sq[n] = d;
    report.heterogeneity += vehicle_weights[n] * d;
  }
  for (double v : mean) report.grad_norm_sq += v * v;
  return report;
}

// Per-component minibatch gradient-norm statistics over one probe pass:
// the maximum norm estimates G_s, the variance of the norms estimates
// sigma_s^2. Component order matches GradientStats: CE, MI_m..., NE_m...
// Gradients are taken with respect to the model parameters.
template <typename T>
GradientStats probe_gradient_stats(SegNet<T>& net, AdapterStack<T>& adapters, const Dataset& data,
                                   const std::vector<int>& indices, const std::vector<int>& taps,
                                   int batch_size, int ne_channels = 0) {
  if (indices.empty()) throw ContractError("gradient probe on an empty dataset");
  if (batch_size < 1) throw ContractError("probe batch size must be positive");
  const size_t M = taps.size();
  // all components present regardless of the training weights
  LossWeights probe_weights = LossWeights::uniform(M, 1.0, 1.0);
  net.set_requires_grad(true);
  adapters.set_requires_grad(true);

  std::vector<std::vector<double>> norms(1 + 2 * M);
  for (size_t first = 0; first < indices.size(); first += batch_size) {
    const size_t count = std::min(static_cast<size_t>(batch_size), indices.size() - first);
    auto [images, labels] = make_batch<T>(data, indices, first, count);
    Tape<T> tape;
    auto [logits, acts] = net.forward_with_taps(tape, tape.constant(images), taps);
    auto vars = build_total_loss(tape, logits, acts, adapters, labels, probe_weights, ne_channels);
    auto norm_from = [&](Var v) {
      net.zero_grad();
      adapters.zero_grad();
      tape.backward(v);
      double sq = 0.0;
      for (const auto& p : net.params())
        for (T g : p.tensor.grad) sq += static_cast<double>(g) * g;
      return std::sqrt(sq);
    };
    norms[0].push_back(norm_from(vars.ce));
    for (size_t m = 0; m < M; ++m) norms[1 + m].push_back(norm_from(vars.mi[m]));
    for (size_t m = 0; m < M; ++m) norms[1 + M + m].push_back(norm_from(vars.ne[m]));
  }
  net.zero_grad();
  adapters.zero_grad();

  GradientStats stats;
  for (const auto& series : norms) {
    double mx = 0.0, mean = 0.0;
    for (double v : series) {
      mx = std::max(mx, v);
      mean += v;
    }
    mean /= static_cast<double>(series.size());
    double var = 0.0;
    for (double v : series) var += (v - mean) * (v - mean);
    var /= static_cast<double>(series.size());
    stats.max_norm.push_back(mx);
    stats.variance.push_back(var);
  }
  return stats;
}

// Mean per-pixel channel entropy at each tap of the network over a panel of
// samples; the negation of the entropy regularizer's value.
template <typename T>
std::vector<double> tap_entropies(SegNet<T>& net, const Dataset& data,
                                  const std::vector<int>& indices, const std::vector<int>& taps,
                                  int ne_channels = 0, int chunk = 64) {
  std::vector<double> sums(taps.size(), 0.0);
  if (taps.empty() || indices.empty()) return sums;
  net.set_requires_grad(false);
  const size_t total = indices.size();
  for (size_t first = 0; first < total; first += chunk) {
    const size_t count = std::min(static_cast<size_t>(chunk), total - first);
    auto [images, labels] = make_batch<T>(data, indices, first, count);
    (void)labels;
    Tape<T> tape;
    auto [logits, acts] = net.forward_with_taps(tape, tape.constant(images), taps);
    (void)logits;
    for (size_t m = 0; m < taps.size(); ++m) {
      auto r = ne_reg(tape, acts.features[m], ne_channels);
      sums[m] -= static_cast<double>(tape.scalar_value(r)) * static_cast<double>(count);
    }
  }
  for (auto& s : sums) s /= static_cast<double>(total);
  return sums;
}

}  // namespace fedsup

#pragma once

#include <cstdint>
#include <vector>

#include "fedsup/model.hpp"
#include "fedsup/tape.hpp"

namespace fedsup {

// Per-tap weights of the unified local objective:
//   total = ce + sum_m (alpha[m] * mi[m] + lambda[m] * ne[m])
struct LossWeights {
  std::vector<double> alpha;
  std::vector<double> lambda;

  size_t taps() const { return alpha.size(); }

  void validate() const {
    if (alpha.size() != lambda.size())
      throw ConfigError("loss weight lists differ in length: " + std::to_string(alpha.size()) +
                        " vs " + std::to_string(lambda.size()));
    for (double a : alpha)
      if (a < 0) throw ConfigError("alpha weights must be nonnegative");
    for (double l : lambda)
      if (l < 0) throw ConfigError("lambda weights must be nonnegative");
  }

  bool all_zero() const {
    for (double a : alpha)
      if (a != 0) return false;
    for (double l : lambda)
      if (l != 0) return false;
    return true;
  }

  static LossWeights uniform(size_t taps, double a, double l) {
    return {std::vector<double>(taps, a), std::vector<double>(taps, l)};
  }
};

struct LossBreakdown {
  double ce = 0.0;
  std::vector<double> mi;
  std::vector<double> ne;
  double total = 0.0;

  double mean_mi() const {
    if (mi.empty()) return 0.0;
    double s = 0;
    for (double v : mi) s += v;
    return s / static_cast<double>(mi.size());
  }
  double mean_ne() const {
    if (ne.empty()) return 0.0;
    double s = 0;
    for (double v : ne) s += v;
    return s / static_cast<double>(ne.size());
  }
};

// Output-layer cross-entropy: mean over valid pixels of -log p(true class),
// computed from logits via channel softmax.
template <typename T>
Var ce_loss(Tape<T>& tape, Var logits, const std::vector<int32_t>& labels) {
  return tape.masked_nll_mean(tape.softmax_channels(logits), labels);
}

// Intermediate supervision loss: identical reduction over an adapter's
// per-pixel class distribution. ce_loss and mi_loss are the same function of
// (distribution, labels); ce_loss merely derives its distribution from logits.
template <typename T>
Var mi_loss(Tape<T>& tape, Var adapter_probs, const std::vector<int32_t>& labels) {
  return tape.masked_nll_mean(adapter_probs, labels);
}

// Negative-entropy regularizer on tap activations: mean over batch and pixels
// of sum_c p log p with p the channel softmax of z. In [-log C, 0].
// ne_channels == 0 uses all channels, otherwise the first ne_channels.
template <typename T>
Var ne_reg(Tape<T>& tape, Var z, int ne_channels = 0) {
  Var base = z;
  if (ne_channels > 0 && ne_channels < tape.shape(z)[1])
    base = tape.channel_prefix(z, ne_channels);
  return tape.plogp_mean(tape.softmax_channels(base));
}

// Scalar-level combination, used for reporting. The invariant
// total == ce + sum_m(alpha*mi + lambda*ne) holds by construction.
inline LossBreakdown total_loss(double ce, const std::vector<double>& mi,
                                const std::vector<double>& ne, const LossWeights& weights) {
  weights.validate();
  if (mi.size() != weights.taps() || ne.size() != weights.taps())
    throw ConfigError("loss component lists do not match the tap count " +
                      std::to_string(weights.taps()));
  LossBreakdown b;
  b.ce = ce;
  b.mi = mi;
  b.ne = ne;
  b.total = ce;
  for (size_t m = 0; m < weights.taps(); ++m)
    b.total += weights.alpha[m] * mi[m] + weights.lambda[m] * ne[m];
  return b;
}

// Tape-level combination of the unified objective. Zero-weighted terms are
// not recorded at all, so a run with all weights zero produces a graph (and
// gradients) bit-identical to plain cross-entropy training.
struct TotalLossVars {
  Var total;
  Var ce;
  std::vector<Var> mi;  // invalid Var where alpha[m] == 0
  std::vector<Var> ne;  // invalid Var where lambda[m] == 0
};

// Builds CE plus the weighted per-tap terms from a forward pass.
// Adapter probabilities (and their parameter leaves) are only materialized for
// taps with alpha > 0; softmax entropy terms only for lambda > 0.
template <typename T>
TotalLossVars build_total_loss(Tape<T>& tape, Var logits, const TapActivations<T>& acts,
                                  AdapterStack<T>& adapters, const std::vector<int32_t>& labels,
                                  const LossWeights& weights, int ne_channels = 0) {
  weights.validate();
  if (acts.features.size() != weights.taps())
    throw ConfigError("tap count " + std::to_string(acts.features.size()) +
                      " does not match loss weight count " + std::to_string(weights.taps()));
  TotalLossVars out;
  out.ce = ce_loss(tape, logits, labels);
  out.total = out.ce;
  out.mi.assign(weights.taps(), Var{});
  out.ne.assign(weights.taps(), Var{});
  for (size_t m = 0; m < weights.taps(); ++m) {
    if (weights.alpha[m] != 0) {
      Var probs = adapters.forward(tape, m, acts.features[m]);
      out.mi[m] = mi_loss(tape, probs, labels);
      out.total = tape.add(out.total, tape.scale(out.mi[m], static_cast<T>(weights.alpha[m])));
    }
    if (weights.lambda[m] != 0) {
      out.ne[m] = ne_reg(tape, acts.features[m], ne_channels);
      out.total = tape.add(out.total, tape.scale(out.ne[m], static_cast<T>(weights.lambda[m])));
    }
  }
  return out;
}

// Reads the scalar components out of a built loss graph. Skipped
// (zero-weight) terms are reported as 0.
template <typename T>
LossBreakdown read_breakdown(const Tape<T>& tape, const TotalLossVars& vars,
                             const LossWeights& weights) {
  LossBreakdown b;
  b.ce = static_cast<double>(tape.scalar_value(vars.ce));
  b.mi.resize(weights.taps(), 0.0);
  b.ne.resize(weights.taps(), 0.0);
  b.total = b.ce;
  for (size_t m = 0; m < weights.taps(); ++m) {
    if (vars.mi[m].valid()) {
      b.mi[m] = static_cast<double>(tape.scalar_value(vars.mi[m]));
      b.total += weights.alpha[m] * b.mi[m];
    }
    if (vars.ne[m].valid()) {
      b.ne[m] = static_cast<double>(tape.scalar_value(vars.ne[m]));
      b.total += weights.lambda[m] * b.ne[m];
    }
  }
  return b;
}

}  // namespace fedsup

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fedsup/tensor.hpp"

namespace fedsup {

struct GradCheckResult {
  double max_rel_err = 0.0;
  size_t worst_param = 0;   // index into the parameter list
  int64_t worst_coord = 0;  // flat coordinate within that parameter
  double analytic = 0.0;
  double numeric = 0.0;
  int64_t checked = 0;
  int64_t skipped = 0;
};

inline double default_gradcheck_epsilon(bool double_precision) {
  return double_precision ? 1e-5 : 1e-3;
}

// One objective evaluation: the scalar value plus the hash of the discrete
// branch decisions (relu signs, pooling argmaxes) taken on the way.
struct ObjectiveSample {
  double value = 0.0;
  uint64_t branch_hash = 0;
};

// Variant aware of non-differentiable points: a coordinate whose +eps and
// -eps evaluations took different branches (a relu flipped sign or a pooling
// argmax moved inside the perturbation interval) is excluded from the check,
// since the objective is not differentiable there at this epsilon.
template <typename T>
GradCheckResult finite_diff_check_branched(
    const std::function<ObjectiveSample()>& f, const std::vector<Tensor<T>*>& params,
    double epsilon, const std::function<bool(size_t, int64_t)>& skip = nullptr) {
  if (epsilon <= 0.0) throw ContractError("finite_diff_check: epsilon must be positive");
  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = *params[pi];
    if (!p.has_grad()) throw ContractError("finite_diff_check: parameter " + std::to_string(pi) +
                                           " has no analytic gradient");
    for (int64_t i = 0; i < p.size(); ++i) {
      if (skip && skip(pi, i)) {
        ++res.skipped;
        continue;
      }
      const T saved = p[i];
      p[i] = static_cast<T>(static_cast<double>(saved) + epsilon);
      const ObjectiveSample fp = f();
      p[i] = static_cast<T>(static_cast<double>(saved) - epsilon);
      const ObjectiveSample fm = f();
      p[i] = saved;
      if (fp.branch_hash != fm.branch_hash) {
        ++res.skipped;
        continue;
      }
      const double numeric = (fp.value - fm.value) / (2.0 * epsilon);
      const double analytic = static_cast<double>(p.grad[i]);
      const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = pi;
        res.worst_coord = i;
        res.analytic = analytic;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

// Central-difference check of the gradients already stored in each parameter's
// grad field. `f` re-evaluates the scalar objective at the parameters' current
// values. Relative error per coordinate is |analytic - numeric| / max(1, |numeric|);
// the maximum over all checked coordinates is returned. `skip(param, coord)`
// excludes coordinates (e.g. those sitting on a relu kink) from the check.
template <typename T>
GradCheckResult finite_diff_check(
    const std::function<double()>& f, const std::vector<Tensor<T>*>& params, double epsilon,
    const std::function<bool(size_t, int64_t)>& skip = nullptr) {
  auto sampled = [&f]() { return ObjectiveSample{f(), 0}; };
  return finite_diff_check_branched<T>(sampled, params, epsilon, skip);
}

}  // namespace fedsup

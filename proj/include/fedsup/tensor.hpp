#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fedsup/errors.hpp"
#include "fedsup/rng.hpp"

namespace fedsup {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor. Gradients live in `grad` (same length as `data`)
// once a backward pass has written them; an empty grad means "no gradient yet".
template <typename T>
class Tensor {
 private:
  Shape shape_;
  std::vector<T> data_;

 public:
  bool requires_grad = false;
  std::vector<T> grad;

  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(check_and_count(shape_), T(0)) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    for (int d : shape_)
      if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
  }

  static Tensor randn(Shape shape, RngStream& rng, T stddev = T(1)) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<T>(rng.normal() * static_cast<double>(stddev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  const std::vector<T>& data() const { return data_; }
  std::vector<T>& data() { return data_; }

  T operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }

  bool has_grad() const { return !grad.empty(); }

  void zero_grad() { grad.assign(data_.size(), T(0)); }

  void accumulate_grad(const std::vector<T>& g) {
    if (g.size() != data_.size())
      throw DimensionError("gradient length mismatch for shape " + shape_str(shape_));
    if (grad.empty()) grad.assign(data_.size(), T(0));
    for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }

 private:
  static size_t check_and_count(const Shape& shape) {
    for (int d : shape)
      if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    return static_cast<size_t>(shape_numel(shape));
  }
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamSet = std::vector<NamedTensor<T>>;

// Elementwise y += a * x over a parameter set. Shapes must match pairwise.
template <typename T>
void param_axpy(ParamSet<T>& y, T a, const ParamSet<T>& x) {
  if (y.size() != x.size()) throw DimensionError("parameter set size mismatch in axpy");
  for (size_t i = 0; i < y.size(); ++i) {
    if (y[i].tensor.shape() != x[i].tensor.shape())
      throw DimensionError("parameter shape mismatch for " + y[i].name);
    auto& yd = y[i].tensor.data();
    const auto& xd = x[i].tensor.data();
    for (size_t j = 0; j < yd.size(); ++j) yd[j] += a * xd[j];
  }
}

template <typename T>
void param_scale(ParamSet<T>& y, T a) {
  for (auto& p : y)
    for (auto& v : p.tensor.data()) v *= a;
}

template <typename T>
int64_t param_count(const ParamSet<T>& p) {
  int64_t n = 0;
  for (const auto& t : p) n += t.tensor.size();
  return n;
}

}  // namespace fedsup

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fedsup/tensor.hpp"

namespace fedsup {

// Probabilities are clamped to at least this value before any log.
inline constexpr double kLogClampEps = 1e-12;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class OpKind {
  kLeaf,
  kAdd,
  kMul,
  kScale,
  kConv2d,
  kDense,
  kRelu,
  kMaxPool2x2,
  kUpsample2x,
  kSoftmaxChannels,
  kChannelPrefix,
  kMaskedNllMean,
  kPlogpMean,
  kSumAll,
};

// Reverse-mode gradient tape over dense tensors. Operations append nodes in
// execution order; backward() replays them in reverse, which is a reverse
// topological order by construction. Leaves bound to an external Tensor with
// requires_grad get their gradients written back (accumulating) into the
// tensor's grad field.
template <typename T>
class Tape {
 public:
  struct Slot {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    Tensor<T>* origin = nullptr;
    bool needs_grad = false;
  };

  struct Node {
    OpKind op;
    int in0 = -1, in1 = -1, in2 = -1;
    int out = -1;
    std::vector<int32_t> iaux;  // op-specific: labels, argmax indices, stride/pad
    T scalar = T(0);            // op-specific: scale factor
  };

  void clear() {
    slots_.clear();
    nodes_.clear();
    branch_hash_ = 0xcbf29ce484222325ULL;
  }

  size_t num_nodes() const { return nodes_.size(); }

  // Hash over every discrete branching decision taken during the forward pass
  // (relu sign tests, pooling argmax picks). Two forwards with equal hashes
  // followed the same piecewise-smooth branch of the objective, so central
  // differences between them are valid.
  uint64_t branch_hash() const { return branch_hash_; }

  const Shape& shape(Var v) const { return slots_[v.id].shape; }
  const std::vector<T>& value(Var v) const { return slots_[v.id].value; }
  const std::vector<T>& grad(Var v) const { return slots_[v.id].grad; }

  T scalar_value(Var v) const {
    if (slots_[v.id].value.size() != 1) throw ContractError("scalar_value on non-scalar var");
    return slots_[v.id].value[0];
  }

  // Registers an external tensor as a leaf. Values are copied; if the tensor
  // requires grad, backward() accumulates into its grad field.
  Var leaf(Tensor<T>& t) {
    int id = new_slot(t.shape(), t.data());
    slots_[id].origin = &t;
    slots_[id].needs_grad = t.requires_grad;
    nodes_.push_back({OpKind::kLeaf, -1, -1, -1, id, {}, T(0)});
    return Var{id};
  }

  // Leaf from a value copy with no writeback (e.g. input batches).
  Var constant(const Tensor<T>& t) {
    int id = new_slot(t.shape(), t.data());
    nodes_.push_back({OpKind::kLeaf, -1, -1, -1, id, {}, T(0)});
    return Var{id};
  }

  Var add(Var a, Var b) {
    require_same_shape(a, b, "add");
    int out = new_slot(slots_[a.id].shape);
    auto& o = slots_[out].value;
    const auto& av = slots_[a.id].value;
    const auto& bv = slots_[b.id].value;
    for (size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
    push_node({OpKind::kAdd, a.id, b.id, -1, out, {}, T(0)}, a, b);
    return Var{out};
  }

  Var mul(Var a, Var b) {
    require_same_shape(a, b, "mul");
    int out = new_slot(slots_[a.id].shape);
    auto& o = slots_[out].value;
    const auto& av = slots_[a.id].value;
    const auto& bv = slots_[b.id].value;
    for (size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
    push_node({OpKind::kMul, a.id, b.id, -1, out, {}, T(0)}, a, b);
    return Var{out};
  }

  Var scale(Var a, T c) {
    int out = new_slot(slots_[a.id].shape);
    auto& o = slots_[out].value;
    const auto& av = slots_[a.id].value;
    for (size_t i = 0; i < o.size(); ++i) o[i] = c * av[i];
    push_node({OpKind::kScale, a.id, -1, -1, out, {}, c}, a, a);
    return Var{out};
  }

  // Cross-correlation with odd kernel, stride in {1,2}. Output spatial size
  // H' = (H + 2*pad - k) / stride + 1.
  Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Shape& xs = slots_[x.id].shape;
    const Shape& ws = slots_[w.id].shape;
    const Shape& bs = slots_[b.id].shape;
    if (xs.size() != 4) throw DimensionError("conv2d: input must be [B,C,H,W], got " + shape_str(xs));
    if (ws.size() != 4) throw DimensionError("conv2d: kernel must be [Co,C,k,k], got " + shape_str(ws));
    if (ws[2] != ws[3] || ws[2] % 2 == 0)
      throw ContractError("conv2d: kernel must be square with odd size, got " + shape_str(ws));
    if (stride != 1 && stride != 2) throw ContractError("conv2d: stride must be 1 or 2");
    if (pad < 0) throw ContractError("conv2d: negative padding");
    if (ws[1] != xs[1])
      throw DimensionError("conv2d: input channel axis " + std::to_string(xs[1]) +
                           " does not match kernel channel axis " + std::to_string(ws[1]));
    if (bs.size() != 1 || bs[0] != ws[0])
      throw DimensionError("conv2d: bias shape " + shape_str(bs) + " does not match Co=" +
                           std::to_string(ws[0]));
    const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int Co = ws[0], k = ws[2];
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho <= 0 || Wo <= 0)
      throw DimensionError("conv2d: empty output for input " + shape_str(xs) + " kernel " +
                           shape_str(ws));
    int out = new_slot({B, Co, Ho, Wo});
    conv2d_forward(slots_[x.id].value.data(), slots_[w.id].value.data(),
                   slots_[b.id].value.data(), slots_[out].value.data(), B, C, H, W, Co, k, stride,
                   pad, Ho, Wo);
    Node n{OpKind::kConv2d, x.id, w.id, b.id, out, {stride, pad}, T(0)};
    slots_[out].needs_grad =
        slots_[x.id].needs_grad || slots_[w.id].needs_grad || slots_[b.id].needs_grad;
    nodes_.push_back(std::move(n));
    return Var{out};
  }

  // Affine map: [B,F] x [F,G] + [G].
  Var dense(Var x, Var w, Var b) {
    const Shape& xs = slots_[x.id].shape;
    const Shape& ws = slots_[w.id].shape;
    const Shape& bs = slots_[b.id].shape;
    if (xs.size() != 2 || ws.size() != 2)
      throw DimensionError("dense: expected [B,F] and [F,G], got " + shape_str(xs) + " and " +
                           shape_str(ws));
    if (xs[1] != ws[0])
      throw DimensionError("dense: inner axes disagree, input " + std::to_string(xs[1]) +
                           " vs weight " + std::to_string(ws[0]));
    if (bs.size() != 1 || bs[0] != ws[1])
      throw DimensionError("dense: bias shape " + shape_str(bs) + " does not match G=" +
                           std::to_string(ws[1]));
    const int B = xs[0], F = xs[1], G = ws[1];
    int out = new_slot({B, G});
    const T* xv = slots_[x.id].value.data();
    const T* wv = slots_[w.id].value.data();
    const T* bv = slots_[b.id].value.data();
    T* ov = slots_[out].value.data();
    for (int i = 0; i < B; ++i) {
      for (int j = 0; j < G; ++j) ov[i * G + j] = bv[j];
      for (int kk = 0; kk < F; ++kk) {
        const T xik = xv[i * F + kk];
        const T* wrow = wv + kk * G;
        T* orow = ov + i * G;
        for (int j = 0; j < G; ++j) orow[j] += xik * wrow[j];
      }
    }
    Node n{OpKind::kDense, x.id, w.id, b.id, out, {}, T(0)};
    slots_[out].needs_grad =
        slots_[x.id].needs_grad || slots_[w.id].needs_grad || slots_[b.id].needs_grad;
    nodes_.push_back(std::move(n));
    return Var{out};
  }

  Var relu(Var x) {
    int out = new_slot(slots_[x.id].shape);
    const auto& xv = slots_[x.id].value;
    auto& ov = slots_[out].value;
    uint64_t h = branch_hash_;
    for (size_t i = 0; i < ov.size(); ++i) {
      const bool pos = xv[i] > T(0);
      ov[i] = pos ? xv[i] : T(0);
      h = (h ^ static_cast<uint64_t>(pos)) * 0x100000001b3ULL;
    }
    branch_hash_ = h;
    push_node({OpKind::kRelu, x.id, -1, -1, out, {}, T(0)}, x, x);
    return Var{out};
  }

  // 2x2 max pooling with stride 2; requires even spatial extents.
  Var maxpool2x2(Var x) {
    const Shape& xs = slots_[x.id].shape;
    if (xs.size() != 4) throw DimensionError("maxpool2x2: input must be [B,C,H,W]");
    if (xs[2] % 2 != 0 || xs[3] % 2 != 0)
      throw DimensionError("maxpool2x2: odd spatial extent " + std::to_string(xs[2]) + "x" +
                           std::to_string(xs[3]));
    const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int Ho = H / 2, Wo = W / 2;
    int out = new_slot({B, C, Ho, Wo});
    Node n{OpKind::kMaxPool2x2, x.id, -1, -1, out, {}, T(0)};
    n.iaux.resize(static_cast<size_t>(B) * C * Ho * Wo);
    const T* xv = slots_[x.id].value.data();
    T* ov = slots_[out].value.data();
    int64_t oi = 0;
    for (int bc = 0; bc < B * C; ++bc) {
      const T* plane = xv + static_cast<int64_t>(bc) * H * W;
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow, ++oi) {
          int base = (oh * 2) * W + ow * 2;
          int best = base;
          T bv = plane[base];
          // scan order gives deterministic tie-breaking
          if (plane[base + 1] > bv) { bv = plane[base + 1]; best = base + 1; }
          if (plane[base + W] > bv) { bv = plane[base + W]; best = base + W; }
          if (plane[base + W + 1] > bv) { bv = plane[base + W + 1]; best = base + W + 1; }
          ov[oi] = bv;
          n.iaux[oi] = static_cast<int32_t>(bc * H * W + best);
          branch_hash_ = (branch_hash_ ^ static_cast<uint64_t>(best - base)) * 0x100000001b3ULL;
        }
      }
    }
    slots_[out].needs_grad = slots_[x.id].needs_grad;
    nodes_.push_back(std::move(n));
    return Var{out};
  }

  Var upsample_nearest2x(Var x) {
    const Shape& xs = slots_[x.id].shape;
    if (xs.size() != 4) throw DimensionError("upsample_nearest2x: input must be [B,C,H,W]");
    const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    int out = new_slot({B, C, H * 2, W * 2});
    const T* xv = slots_[x.id].value.data();
    T* ov = slots_[out].value.data();
    for (int bc = 0; bc < B * C; ++bc) {
      const T* src = xv + static_cast<int64_t>(bc) * H * W;
      T* dst = ov + static_cast<int64_t>(bc) * H * W * 4;
      for (int h = 0; h < H; ++h) {
        for (int w = 0; w < W; ++w) {
          T v = src[h * W + w];
          int d = (h * 2) * (W * 2) + w * 2;
          dst[d] = v;
          dst[d + 1] = v;
          dst[d + W * 2] = v;
          dst[d + W * 2 + 1] = v;
        }
      }
    }
    push_node({OpKind::kUpsample2x, x.id, -1, -1, out, {}, T(0)}, x, x);
    return Var{out};
  }

  // Per-pixel softmax across the channel axis, max-subtracted for stability.
  Var softmax_channels(Var x) {
    const Shape& xs = slots_[x.id].shape;
    if (xs.size() != 4) throw DimensionError("softmax_channels: input must be [B,C,H,W]");
    const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    int out = new_slot(xs);
    const T* xv = slots_[x.id].value.data();
    T* ov = slots_[out].value.data();
    const int64_t plane = static_cast<int64_t>(H) * W;
    for (int b = 0; b < B; ++b) {
      const T* xb = xv + static_cast<int64_t>(b) * C * plane;
      T* ob = ov + static_cast<int64_t>(b) * C * plane;
      for (int64_t p = 0; p < plane; ++p) {
        T m = xb[p];
        for (int c = 1; c < C; ++c) m = std::max(m, xb[c * plane + p]);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) {
          double e = std::exp(static_cast<double>(xb[c * plane + p] - m));
          ob[c * plane + p] = static_cast<T>(e);
          sum += e;
        }
        const T inv = static_cast<T>(1.0 / sum);
        for (int c = 0; c < C; ++c) ob[c * plane + p] *= inv;
      }
    }
    push_node({OpKind::kSoftmaxChannels, x.id, -1, -1, out, {}, T(0)}, x, x);
    return Var{out};
  }

  // First `channels` channels of a [B,C,H,W] tensor.
  Var channel_prefix(Var x, int channels) {
    const Shape& xs = slots_[x.id].shape;
    if (xs.size() != 4) throw DimensionError("channel_prefix: input must be [B,C,H,W]");
    if (channels <= 0 || channels > xs[1])
      throw ContractError("channel_prefix: requested " + std::to_string(channels) + " of " +
                          std::to_string(xs[1]) + " channels");
    const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    int out = new_slot({B, channels, H, W});
    const int64_t plane = static_cast<int64_t>(H) * W;
    const T* xv = slots_[x.id].value.data();
    T* ov = slots_[out].value.data();
    for (int b = 0; b < B; ++b)
      std::copy_n(xv + (static_cast<int64_t>(b) * C) * plane, channels * plane,
                  ov + (static_cast<int64_t>(b) * channels) * plane);
    push_node({OpKind::kChannelPrefix, x.id, -1, -1, out, {}, T(0)}, x, x);
    return Var{out};
  }

  // Mean over valid pixels of -log(max(p[true class], eps)). Labels hold class
  // ids in [0,K) or the ignore value 255. Works on probabilities, so the same
  // op serves the output loss (after softmax) and adapter-based losses.
  Var masked_nll_mean(Var probs, const std::vector<int32_t>& labels) {
    const Shape& ps = slots_[probs.id].shape;
    if (ps.size() != 4) throw DimensionError("masked_nll_mean: probs must be [B,K,H,W]");
    const int B = ps[0], K = ps[1], H = ps[2], W = ps[3];
    if (static_cast<int64_t>(labels.size()) != static_cast<int64_t>(B) * H * W)
      throw DimensionError("masked_nll_mean: label count " + std::to_string(labels.size()) +
                           " does not match " + std::to_string(static_cast<int64_t>(B) * H * W) +
                           " pixels");
    const int64_t plane = static_cast<int64_t>(H) * W;
    const T* pv = slots_[probs.id].value.data();
    double acc = 0.0;
    int64_t valid = 0;
    for (int b = 0; b < B; ++b) {
      for (int64_t p = 0; p < plane; ++p) {
        int32_t y = labels[b * plane + p];
        if (y == kIgnoreLabel) continue;
        if (y < 0 || y >= K)
          throw DataError("label " + std::to_string(y) + " out of range [0," + std::to_string(K) +
                          ") at sample " + std::to_string(b));
        double pt = static_cast<double>(pv[(static_cast<int64_t>(b) * K + y) * plane + p]);
        acc -= std::log(std::max(pt, kLogClampEps));
        ++valid;
      }
    }
    int out = new_slot({1});
    slots_[out].value[0] = valid > 0 ? static_cast<T>(acc / static_cast<double>(valid)) : T(0);
    Node n{OpKind::kMaskedNllMean, probs.id, -1, -1, out, {}, T(0)};
    n.iaux.assign(labels.begin(), labels.end());
    n.iaux.push_back(static_cast<int32_t>(valid));
    slots_[out].needs_grad = slots_[probs.id].needs_grad;
    nodes_.push_back(std::move(n));
    return Var{out};
  }

  // Mean over batch and pixels of sum_c p*log(max(p, eps)); the negative
  // entropy of a per-pixel channel distribution, in [-log C, 0].
  Var plogp_mean(Var probs) {
    const Shape& ps = slots_[probs.id].shape;
    if (ps.size() != 4) throw DimensionError("plogp_mean: probs must be [B,C,H,W]");
    const int B = ps[0], C = ps[1], H = ps[2], W = ps[3];
    const int64_t plane = static_cast<int64_t>(H) * W;
    const T* pv = slots_[probs.id].value.data();
    double acc = 0.0;
    for (int64_t i = 0; i < static_cast<int64_t>(B) * C * plane; ++i) {
      double p = static_cast<double>(pv[i]);
      acc += p * std::log(std::max(p, kLogClampEps));
    }
    int out = new_slot({1});
    slots_[out].value[0] = static_cast<T>(acc / (static_cast<double>(B) * plane));
    push_node({OpKind::kPlogpMean, probs.id, -1, -1, out, {}, T(0)}, probs, probs);
    return Var{out};
  }

  Var sum_all(Var x) {
    int out = new_slot({1});
    double acc = 0.0;
    for (T v : slots_[x.id].value) acc += static_cast<double>(v);
    slots_[out].value[0] = static_cast<T>(acc);
    push_node({OpKind::kSumAll, x.id, -1, -1, out, {}, T(0)}, x, x);
    return Var{out};
  }

  // Reverse pass from a scalar loss. Slot gradients are reset on entry, so a
  // tape may be replayed from several scalars; external tensors accumulate.
  void backward(Var loss) {
    if (!loss.valid() || slots_[loss.id].value.size() != 1)
      throw ContractError("backward: loss must be a scalar");
    for (auto& s : slots_) s.grad.assign(s.value.size(), T(0));
    slots_[loss.id].grad[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) backward_node(*it);
    for (auto& s : slots_)
      if (s.origin != nullptr && s.origin->requires_grad) s.origin->accumulate_grad(s.grad);
  }

 private:
  static constexpr int32_t kIgnoreLabel = 255;

  int new_slot(const Shape& shape) {
    slots_.push_back(Slot{shape, std::vector<T>(static_cast<size_t>(shape_numel(shape)), T(0)),
                          {}, nullptr, false});
    return static_cast<int>(slots_.size()) - 1;
  }

  int new_slot(const Shape& shape, const std::vector<T>& values) {
    slots_.push_back(Slot{shape, values, {}, nullptr, false});
    return static_cast<int>(slots_.size()) - 1;
  }

  void require_same_shape(Var a, Var b, const char* op) {
    if (slots_[a.id].shape != slots_[b.id].shape)
      throw DimensionError(std::string(op) + ": shape " + shape_str(slots_[a.id].shape) +
                           " vs " + shape_str(slots_[b.id].shape));
  }

  void push_node(Node n, Var a, Var b) {
    slots_[n.out].needs_grad = slots_[a.id].needs_grad || slots_[b.id].needs_grad;
    nodes_.push_back(std::move(n));
  }

  static void conv2d_forward(const T* x, const T* w, const T* bias, T* out, int B, int C, int H,
                             int W, int Co, int k, int stride, int pad, int Ho, int Wo) {
    const int64_t in_plane = static_cast<int64_t>(H) * W;
    const int64_t out_plane = static_cast<int64_t>(Ho) * Wo;
    for (int b = 0; b < B; ++b) {
      for (int co = 0; co < Co; ++co) {
        T* op = out + (static_cast<int64_t>(b) * Co + co) * out_plane;
        const T bv = bias[co];
        for (int64_t i = 0; i < out_plane; ++i) op[i] = bv;
        for (int ci = 0; ci < C; ++ci) {
          const T* xp = x + (static_cast<int64_t>(b) * C + ci) * in_plane;
          const T* wp = w + ((static_cast<int64_t>(co) * C + ci)) * k * k;
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              const T wv = wp[kh * k + kw];
              // valid output range for this kernel offset
              int oh0 = std::max(0, ceil_div(pad - kh, stride));
              int oh1 = std::min(Ho - 1, (H - 1 - kh + pad) / stride);
              int ow0 = std::max(0, ceil_div(pad - kw, stride));
              int ow1 = std::min(Wo - 1, (W - 1 - kw + pad) / stride);
              for (int oh = oh0; oh <= oh1; ++oh) {
                const T* xrow = xp + (oh * stride - pad + kh) * W - pad + kw;
                T* orow = op + static_cast<int64_t>(oh) * Wo;
                if (stride == 1) {
                  for (int ow = ow0; ow <= ow1; ++ow) orow[ow] += wv * xrow[ow];
                } else {
                  for (int ow = ow0; ow <= ow1; ++ow) orow[ow] += wv * xrow[ow * 2];
                }
              }
            }
          }
        }
      }
    }
  }

  void backward_conv2d(const Node& n) {
    const Shape& xs = slots_[n.in0].shape;
    const Shape& ws = slots_[n.in1].shape;
    const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int Co = ws[0], k = ws[2];
    const int stride = n.iaux[0], pad = n.iaux[1];
    const Shape& os = slots_[n.out].shape;
    const int Ho = os[2], Wo = os[3];
    const int64_t in_plane = static_cast<int64_t>(H) * W;
    const int64_t out_plane = static_cast<int64_t>(Ho) * Wo;
    const T* g = slots_[n.out].grad.data();
    const T* x = slots_[n.in0].value.data();
    const T* w = slots_[n.in1].value.data();
    T* gx = slots_[n.in0].grad.data();
    T* gw = slots_[n.in1].grad.data();
    T* gb = slots_[n.in2].grad.data();
    for (int b = 0; b < B; ++b) {
      for (int co = 0; co < Co; ++co) {
        const T* gp = g + (static_cast<int64_t>(b) * Co + co) * out_plane;
        double bacc = 0.0;
        for (int64_t i = 0; i < out_plane; ++i) bacc += static_cast<double>(gp[i]);
        gb[co] += static_cast<T>(bacc);
        for (int ci = 0; ci < C; ++ci) {
          const T* xp = x + (static_cast<int64_t>(b) * C + ci) * in_plane;
          T* gxp = gx + (static_cast<int64_t>(b) * C + ci) * in_plane;
          const T* wp = w + (static_cast<int64_t>(co) * C + ci) * k * k;
          T* gwp = gw + (static_cast<int64_t>(co) * C + ci) * k * k;
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              const T wv = wp[kh * k + kw];
              double wacc = 0.0;
              int oh0 = std::max(0, ceil_div(pad - kh, stride));
              int oh1 = std::min(Ho - 1, (H - 1 - kh + pad) / stride);
              int ow0 = std::max(0, ceil_div(pad - kw, stride));
              int ow1 = std::min(Wo - 1, (W - 1 - kw + pad) / stride);
              for (int oh = oh0; oh <= oh1; ++oh) {
                const int xoff = (oh * stride - pad + kh) * W - pad + kw;
                const T* grow = gp + static_cast<int64_t>(oh) * Wo;
                const T* xrow = xp + xoff;
                T* gxrow = gxp + xoff;
                if (stride == 1) {
                  for (int ow = ow0; ow <= ow1; ++ow) {
                    wacc += static_cast<double>(grow[ow]) * xrow[ow];
                    gxrow[ow] += wv * grow[ow];
                  }
                } else {
                  for (int ow = ow0; ow <= ow1; ++ow) {
                    wacc += static_cast<double>(grow[ow]) * xrow[ow * 2];
                    gxrow[ow * 2] += wv * grow[ow];
                  }
                }
              }
              gwp[kh * k + kw] += static_cast<T>(wacc);
            }
          }
        }
      }
    }
  }

  void backward_node(const Node& n) {
    switch (n.op) {
      case OpKind::kLeaf:
        break;
      case OpKind::kAdd: {
        const auto& g = slots_[n.out].grad;
        auto& ga = slots_[n.in0].grad;
        auto& gb = slots_[n.in1].grad;
        for (size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case OpKind::kMul: {
        const auto& g = slots_[n.out].grad;
        const auto& av = slots_[n.in0].value;
        const auto& bv = slots_[n.in1].value;
        auto& ga = slots_[n.in0].grad;
        auto& gb = slots_[n.in1].grad;
        for (size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * bv[i];
          gb[i] += g[i] * av[i];
        }
        break;
      }
      case OpKind::kScale: {
        const auto& g = slots_[n.out].grad;
        auto& ga = slots_[n.in0].grad;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += n.scalar * g[i];
        break;
      }
      case OpKind::kConv2d:
        backward_conv2d(n);
        break;
      case OpKind::kDense: {
        const Shape& xs = slots_[n.in0].shape;
        const Shape& ws = slots_[n.in1].shape;
        const int B = xs[0], F = xs[1], G = ws[1];
        const T* g = slots_[n.out].grad.data();
        const T* xv = slots_[n.in0].value.data();
        const T* wv = slots_[n.in1].value.data();
        T* gx = slots_[n.in0].grad.data();
        T* gw = slots_[n.in1].grad.data();
        T* gb = slots_[n.in2].grad.data();
        for (int i = 0; i < B; ++i) {
          const T* grow = g + static_cast<int64_t>(i) * G;
          for (int j = 0; j < G; ++j) gb[j] += grow[j];
          for (int kk = 0; kk < F; ++kk) {
            const T* wrow = wv + static_cast<int64_t>(kk) * G;
            T* gwrow = gw + static_cast<int64_t>(kk) * G;
            const T xik = xv[i * F + kk];
            double acc = 0.0;
            for (int j = 0; j < G; ++j) {
              acc += static_cast<double>(grow[j]) * wrow[j];
              gwrow[j] += xik * grow[j];
            }
            gx[i * F + kk] += static_cast<T>(acc);
          }
        }
        break;
      }
      case OpKind::kRelu: {
        const auto& g = slots_[n.out].grad;
        const auto& xv = slots_[n.in0].value;
        auto& gx = slots_[n.in0].grad;
        // subgradient 0 at exactly 0
        for (size_t i = 0; i < g.size(); ++i)
          if (xv[i] > T(0)) gx[i] += g[i];
        break;
      }
      case OpKind::kMaxPool2x2: {
        const auto& g = slots_[n.out].grad;
        auto& gx = slots_[n.in0].grad;
        for (size_t i = 0; i < g.size(); ++i) gx[n.iaux[i]] += g[i];
        break;
      }
      case OpKind::kUpsample2x: {
        const Shape& xs = slots_[n.in0].shape;
        const int BC = xs[0] * xs[1], H = xs[2], W = xs[3];
        const T* g = slots_[n.out].grad.data();
        T* gx = slots_[n.in0].grad.data();
        for (int bc = 0; bc < BC; ++bc) {
          const T* gp = g + static_cast<int64_t>(bc) * H * W * 4;
          T* gxp = gx + static_cast<int64_t>(bc) * H * W;
          for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
              int d = (h * 2) * (W * 2) + w * 2;
              gxp[h * W + w] += gp[d] + gp[d + 1] + gp[d + W * 2] + gp[d + W * 2 + 1];
            }
          }
        }
        break;
      }
      case OpKind::kSoftmaxChannels: {
        const Shape& xs = slots_[n.in0].shape;
        const int B = xs[0], C = xs[1];
        const int64_t plane = static_cast<int64_t>(xs[2]) * xs[3];
        const T* g = slots_[n.out].grad.data();
        const T* p = slots_[n.out].value.data();
        T* gx = slots_[n.in0].grad.data();
        for (int b = 0; b < B; ++b) {
          const int64_t base = static_cast<int64_t>(b) * C * plane;
          for (int64_t q = 0; q < plane; ++q) {
            double dot = 0.0;
            for (int c = 0; c < C; ++c) {
              const int64_t i = base + c * plane + q;
              dot += static_cast<double>(g[i]) * p[i];
            }
            for (int c = 0; c < C; ++c) {
              const int64_t i = base + c * plane + q;
              gx[i] += p[i] * (g[i] - static_cast<T>(dot));
            }
          }
        }
        break;
      }
      case OpKind::kChannelPrefix: {
        const Shape& xs = slots_[n.in0].shape;
        const Shape& os = slots_[n.out].shape;
        const int B = xs[0], C = xs[1], Cp = os[1];
        const int64_t plane = static_cast<int64_t>(xs[2]) * xs[3];
        const T* g = slots_[n.out].grad.data();
        T* gx = slots_[n.in0].grad.data();
        for (int b = 0; b < B; ++b)
          for (int64_t i = 0; i < Cp * plane; ++i)
            gx[static_cast<int64_t>(b) * C * plane + i] += g[static_cast<int64_t>(b) * Cp * plane + i];
        break;
      }
      case OpKind::kMaskedNllMean: {
        const Shape& ps = slots_[n.in0].shape;
        const int B = ps[0], K = ps[1];
        const int64_t plane = static_cast<int64_t>(ps[2]) * ps[3];
        const int64_t valid = n.iaux.back();
        if (valid == 0) break;
        const T go = slots_[n.out].grad[0];
        const T* p = slots_[n.in0].value.data();
        T* gp = slots_[n.in0].grad.data();
        const T inv = static_cast<T>(1.0 / static_cast<double>(valid));
        for (int b = 0; b < B; ++b) {
          for (int64_t q = 0; q < plane; ++q) {
            int32_t y = n.iaux[b * plane + q];
            if (y == kIgnoreLabel) continue;
            const int64_t i = (static_cast<int64_t>(b) * K + y) * plane + q;
            if (static_cast<double>(p[i]) > kLogClampEps) gp[i] -= go * inv / p[i];
          }
        }
        break;
      }
      case OpKind::kPlogpMean: {
        const Shape& ps = slots_[n.in0].shape;
        const int64_t plane = static_cast<int64_t>(ps[2]) * ps[3];
        const T go = slots_[n.out].grad[0];
        const T* p = slots_[n.in0].value.data();
        T* gp = slots_[n.in0].grad.data();
        const double inv = 1.0 / (static_cast<double>(ps[0]) * plane);
        const double logeps = std::log(kLogClampEps);
        const int64_t total = static_cast<int64_t>(ps[0]) * ps[1] * plane;
        for (int64_t i = 0; i < total; ++i) {
          double pv = static_cast<double>(p[i]);
          double d = pv > kLogClampEps ? std::log(pv) + 1.0 : logeps;
          gp[i] += go * static_cast<T>(d * inv);
        }
        break;
      }
      case OpKind::kSumAll: {
        const T go = slots_[n.out].grad[0];
        auto& gx = slots_[n.in0].grad;
        for (auto& v : gx) v += go;
        break;
      }
    }
  }

  static int ceil_div(int a, int b) { return a > 0 ? (a + b - 1) / b : a / b; }

  std::vector<Slot> slots_;
  std::vector<Node> nodes_;
  uint64_t branch_hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace fedsup

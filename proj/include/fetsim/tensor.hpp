#pragma once

// Dense float64 tensor with a reverse-mode gradient tape. Nodes record their
// parents and a backward closure at construction; backward() replays the
// recorded graph once in reverse creation order (creation order is a
// topological order by construction). Heavy kernels are delegated to Eigen
// maps over the owned buffers; everything is single-threaded per tape and
// bit-deterministic for a fixed seed.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "fetsim/common.hpp"
#include "fetsim/rng.hpp"

namespace fetsim {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {
inline uint64_t& node_serial_counter() {
  thread_local uint64_t counter = 0;
  return counter;
}
}  // namespace detail

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily during backward
  bool requires_grad = false;
  uint64_t serial = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;  // accumulates into parents' grad

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    check_dim(shape_numel(shape) == static_cast<long>(data.size()),
              "tensor data length does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    n->serial = ++detail::node_serial_counter();
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto v = std::vector<double>(shape_numel(shape), 0.0);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double fill, bool requires_grad = false) {
    auto v = std::vector<double>(shape_numel(shape), fill);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar_of(double v) { return from_data({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal(0.0, stddev);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  long dim(size_t i) const { return node_->shape[i]; }
  size_t rank() const { return node_->shape.size(); }
  long numel() const { return static_cast<long>(node_->value.size()); }
  // Product of all dimensions except the last; the "row" count when the
  // tensor is viewed as a 2-D matrix over its last axis.
  long lead() const { return numel() / node_->shape.back(); }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  double scalar() const {
    check_contract(numel() == 1, "scalar() on tensor of " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  ConstMatMap mat() const { return ConstMatMap(node_->value.data(), lead(), node_->shape.back()); }
  MatMap mut_mat() { return MatMap(node_->value.data(), lead(), node_->shape.back()); }

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<std::shared_ptr<TensorNode>> parents) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value.assign(shape_numel(n->shape), 0.0);
  n->requires_grad = false;
  for (const auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  n->parents = std::move(parents);
  n->serial = ++node_serial_counter();
  return Tensor(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_dim(a.shape() == b.shape(),
            "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = detail::make_result(a.shape(), {a.node(), b.node()});
  auto *an = a.node().get(), *bn = b.node().get(), *on = out.node().get();
  for (size_t i = 0; i < on->value.size(); ++i) on->value[i] = an->value[i] + bn->value[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [an, bn, on]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
      }
    };
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_dim(a.shape() == b.shape(),
            "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = detail::make_result(a.shape(), {a.node(), b.node()});
  auto *an = a.node().get(), *bn = b.node().get(), *on = out.node().get();
  for (size_t i = 0; i < on->value.size(); ++i) on->value[i] = an->value[i] - bn->value[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [an, bn, on]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    };
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_dim(a.shape() == b.shape(),
            "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = detail::make_result(a.shape(), {a.node(), b.node()});
  auto *an = a.node().get(), *bn = b.node().get(), *on = out.node().get();
  for (size_t i = 0; i < on->value.size(); ++i) on->value[i] = an->value[i] * bn->value[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [an, bn, on]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
      }
    };
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = detail::make_result(a.shape(), {a.node()});
  auto *an = a.node().get(), *on = out.node().get();
  for (size_t i = 0; i < on->value.size(); ++i) on->value[i] = c * an->value[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [an, on, c]() {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += c * on->grad[i];
    };
  }
  return out;
}

// y[..., j] = x[..., j] + b[j]
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  check_dim(b.rank() == 1 && b.dim(0) == x.shape().back(),
            "add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
  Tensor out = detail::make_result(x.shape(), {x.node(), b.node()});
  auto *xn = x.node().get(), *bn = b.node().get(), *on = out.node().get();
  const long rows = x.lead(), cols = x.shape().back();
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) on->value[r * cols + c] = xn->value[r * cols + c] + bn->value[c];
  if (out.requires_grad()) {
    out.node()->backward_fn = [xn, bn, on, rows, cols]() {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (long r = 0; r < rows; ++r)
          for (long c = 0; c < cols; ++c) bn->grad[c] += on->grad[r * cols + c];
      }
    };
  }
  return out;
}

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  check_dim(shape_numel(new_shape) == x.numel(),
            "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  Tensor out = detail::make_result(std::move(new_shape), {x.node()});
  auto *xn = x.node().get(), *on = out.node().get();
  on->value = xn->value;
  if (out.requires_grad()) {
    out.node()->backward_fn = [xn, on]() {
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    };
  }
  return out;
}

// out = sum_i weights[i] * xs[i]; all inputs share one shape.
inline Tensor weighted_sum(const std::vector<Tensor>& xs, const std::vector<double>& weights) {
  check_contract(!xs.empty() && xs.size() == weights.size(), "weighted_sum: empty or mismatched inputs");
  for (const auto& x : xs)
    check_dim(x.shape() == xs[0].shape(), "weighted_sum: shape mismatch across inputs");
  std::vector<std::shared_ptr<TensorNode>> parents;
  for (const auto& x : xs) parents.push_back(x.node());
  Tensor out = detail::make_result(xs[0].shape(), std::move(parents));
  auto* on = out.node().get();
  for (size_t k = 0; k < xs.size(); ++k) {
    const auto& v = xs[k].data();
    const double w = weights[k];
    for (size_t i = 0; i < on->value.size(); ++i) on->value[i] += w * v[i];
  }
  if (out.requires_grad()) {
    std::vector<double> ws = weights;
    out.node()->backward_fn = [on, ws]() {
      for (size_t k = 0; k < on->parents.size(); ++k) {
        auto* p = on->parents[k].get();
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) p->grad[i] += ws[k] * on->grad[i];
      }
    };
  }
  return out;
}

// Concatenate along the last axis; leading dims must agree.
inline Tensor concat_last(const std::vector<Tensor>& xs) {
  check_contract(!xs.empty(), "concat_last: no inputs");
  Shape lead_shape(xs[0].shape().begin(), xs[0].shape().end() - 1);
  long total = 0;
  for (const auto& x : xs) {
    Shape l(x.shape().begin(), x.shape().end() - 1);
    check_dim(l == lead_shape, "concat_last: leading dims disagree");
    total += x.shape().back();
  }
  Shape out_shape = lead_shape;
  out_shape.push_back(total);
  std::vector<std::shared_ptr<TensorNode>> parents;
  for (const auto& x : xs) parents.push_back(x.node());
  Tensor out = detail::make_result(std::move(out_shape), std::move(parents));
  auto* on = out.node().get();
  const long rows = out.lead();
  long offset = 0;
  for (const auto& x : xs) {
    const long c = x.shape().back();
    for (long r = 0; r < rows; ++r)
      std::copy_n(x.data().begin() + r * c, c, on->value.begin() + r * total + offset);
    offset += c;
  }
  if (out.requires_grad()) {
    std::vector<long> widths;
    for (const auto& x : xs) widths.push_back(x.shape().back());
    out.node()->backward_fn = [on, widths, rows, total]() {
      long off = 0;
      for (size_t k = 0; k < on->parents.size(); ++k) {
        auto* p = on->parents[k].get();
        const long c = widths[k];
        if (p->requires_grad) {
          p->ensure_grad();
          for (long r = 0; r < rows; ++r)
            for (long j = 0; j < c; ++j) p->grad[r * c + j] += on->grad[r * total + off + j];
        }
        off += c;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul: contracts the last axis of `a` with the first of `b` (b is 2-D).
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check_dim(b.rank() == 2, "matmul: rhs must be 2-D, got " + shape_str(b.shape()));
  check_dim(a.shape().back() == b.dim(0),
            "matmul: inner dims disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape out_shape = a.shape();
  out_shape.back() = b.dim(1);
  Tensor out = detail::make_result(std::move(out_shape), {a.node(), b.node()});
  auto *an = a.node().get(), *bn = b.node().get(), *on = out.node().get();
  const long m = a.lead(), n = a.shape().back(), p = b.dim(1);
  {
    ConstMatMap A(an->value.data(), m, n), B(bn->value.data(), n, p);
    MatMap O(on->value.data(), m, p);
    O.noalias() = A * B;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [an, bn, on, m, n, p]() {
      ConstMatMap G(on->grad.data(), m, p);
      if (an->requires_grad) {
        an->ensure_grad();
        ConstMatMap B(bn->value.data(), n, p);
        MatMap dA(an->grad.data(), m, n);
        dA.noalias() += G * B.transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        ConstMatMap A(an->value.data(), m, n);
        MatMap dB(bn->grad.data(), n, p);
        dB.noalias() += A.transpose() * G;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
  Tensor out = detail::make_result(x.shape(), {x.node()});
  auto *xn = x.node().get(), *on = out.node().get();
  for (size_t i = 0; i < on->value.size(); ++i) on->value[i] = xn->value[i] > 0.0 ? xn->value[i] : 0.0;
  if (out.requires_grad()) {
    out.node()->backward_fn = [xn, on]() {
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i)
        if (xn->value[i] > 0.0) xn->grad[i] += on->grad[i];
    };
  }
  return out;
}

// Softmax over the last axis with an optional additive mask (same shape).
// Entries with mask <= -1e9 receive vanishing weight; stability comes from
// max-subtraction, so arbitrarily large negative masks are safe.
inline Tensor softmax(const Tensor& x, const Tensor* additive_mask = nullptr) {
  if (additive_mask)
    check_dim(additive_mask->shape() == x.shape(), "softmax: mask shape mismatch");
  std::vector<std::shared_ptr<TensorNode>> parents = {x.node()};
  if (additive_mask) parents.push_back(additive_mask->node());
  Tensor out = detail::make_result(x.shape(), std::move(parents));
  auto *xn = x.node().get(), *on = out.node().get();
  TensorNode* mn = additive_mask ? additive_mask->node().get() : nullptr;
  const long rows = x.lead(), cols = x.shape().back();
  for (long r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (long c = 0; c < cols; ++c) {
      double v = xn->value[r * cols + c] + (mn ? mn->value[r * cols + c] : 0.0);
      mx = std::max(mx, v);
    }
    double denom = 0.0;
    for (long c = 0; c < cols; ++c) {
      double v = xn->value[r * cols + c] + (mn ? mn->value[r * cols + c] : 0.0);
      double e = std::exp(v - mx);
      on->value[r * cols + c] = e;
      denom += e;
    }
    for (long c = 0; c < cols; ++c) on->value[r * cols + c] /= denom;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [xn, mn, on, rows, cols]() {
      for (long r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (long c = 0; c < cols; ++c) dot += on->grad[r * cols + c] * on->value[r * cols + c];
        for (long c = 0; c < cols; ++c) {
          const double g = on->value[r * cols + c] * (on->grad[r * cols + c] - dot);
          if (xn->requires_grad) {
            xn->ensure_grad();
            xn->grad[r * cols + c] += g;
          }
          if (mn && mn->requires_grad) {
            mn->ensure_grad();
            mn->grad[r * cols + c] += g;
          }
        }
      }
    };
  }
  return out;
}

// Layer normalization over the last axis: population variance, eps = 1e-5,
// then elementwise affine with gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const long cols = x.shape().back();
  check_dim(gain.rank() == 1 && gain.dim(0) == cols && bias.rank() == 1 && bias.dim(0) == cols,
            "layer_norm: gain/bias must be [" + std::to_string(cols) + "]");
  constexpr double kEps = 1e-5;
  Tensor out = detail::make_result(x.shape(), {x.node(), gain.node(), bias.node()});
  auto *xn = x.node().get(), *gn = gain.node().get(), *bn = bias.node().get(), *on = out.node().get();
  const long rows = x.lead();
  auto xhat = std::make_shared<std::vector<double>>(xn->value.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (long r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (long c = 0; c < cols; ++c) mean += xn->value[r * cols + c];
    mean /= cols;
    double var = 0.0;
    for (long c = 0; c < cols; ++c) {
      const double d = xn->value[r * cols + c] - mean;
      var += d * d;
    }
    var /= cols;
    const double is = 1.0 / std::sqrt(var + kEps);
    (*inv_std)[r] = is;
    for (long c = 0; c < cols; ++c) {
      const double h = (xn->value[r * cols + c] - mean) * is;
      (*xhat)[r * cols + c] = h;
      on->value[r * cols + c] = gn->value[c] * h + bn->value[c];
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [xn, gn, bn, on, xhat, inv_std, rows, cols]() {
      for (long r = 0; r < rows; ++r) {
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (long c = 0; c < cols; ++c)
            gn->grad[c] += on->grad[r * cols + c] * (*xhat)[r * cols + c];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (long c = 0; c < cols; ++c) bn->grad[c] += on->grad[r * cols + c];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (long c = 0; c < cols; ++c) {
            const double dh = on->grad[r * cols + c] * gn->value[c];
            mean_dh += dh;
            mean_dh_h += dh * (*xhat)[r * cols + c];
          }
          mean_dh /= cols;
          mean_dh_h /= cols;
          for (long c = 0; c < cols; ++c) {
            const double dh = on->grad[r * cols + c] * gn->value[c];
            xn->grad[r * cols + c] +=
                (*inv_std)[r] * (dh - mean_dh - (*xhat)[r * cols + c] * mean_dh_h);
          }
        }
      }
    };
  }
  return out;
}

// Inverted-scaling dropout: training outputs are prescaled by 1/(1-rate) so
// inference needs no rescale.
inline Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  check_contract(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  Tensor out = detail::make_result(x.shape(), {x.node()});
  auto *xn = x.node().get(), *on = out.node().get();
  auto keep = std::make_shared<std::vector<double>>(xn->value.size());
  const double inv_keep = 1.0 / (1.0 - rate);
  for (size_t i = 0; i < on->value.size(); ++i) {
    const double k = rng.next_double() >= rate ? inv_keep : 0.0;
    (*keep)[i] = k;
    on->value[i] = xn->value[i] * k;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [xn, on, keep]() {
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * (*keep)[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention, fused into a single tape node.
//
//   q: [B, Lq, H]   k, v: [B, Lk, H]   additive key logits: [B, Lk] or absent
//
// The key logits are broadcast over heads and query positions (the dynamic
// masking injection point). Returns the per-head contexts re-packed to
// [B, Lq, H]; output projection is the caller's business.
// ---------------------------------------------------------------------------

inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, long num_heads,
                        const Tensor* key_logits = nullptr) {
  check_dim(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: inputs must be [B,L,H]");
  const long B = q.dim(0), Lq = q.dim(1), H = q.dim(2), Lk = k.dim(1);
  check_dim(k.dim(0) == B && v.dim(0) == B && v.dim(1) == Lk && k.dim(2) == H && v.dim(2) == H,
            "attention: k/v shapes inconsistent with q");
  check_contract(H % num_heads == 0, "attention: hidden size not divisible by head count");
  if (key_logits)
    check_dim(key_logits->rank() == 2 && key_logits->dim(0) == B && key_logits->dim(1) == Lk,
              "attention: key logits must be [B,Lk]");
  const long dh = H / num_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<std::shared_ptr<TensorNode>> parents = {q.node(), k.node(), v.node()};
  if (key_logits) parents.push_back(key_logits->node());
  Tensor out = detail::make_result({B, Lq, H}, std::move(parents));
  auto *qn = q.node().get(), *kn = k.node().get(), *vn = v.node().get(), *on = out.node().get();
  TensorNode* mn = key_logits ? key_logits->node().get() : nullptr;

  // Softmax weights are kept for the backward pass: [B, heads, Lq, Lk].
  auto weights = std::make_shared<std::vector<double>>(B * num_heads * Lq * Lk);

  auto head_mat = [&](const std::vector<double>& buf, long b, long h, long L) {
    return Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>(
        buf.data() + (b * L * H) + h * dh, L, dh, Eigen::OuterStride<>(H));
  };

  for (long b = 0; b < B; ++b) {
    for (long h = 0; h < num_heads; ++h) {
      auto Q = head_mat(qn->value, b, h, Lq);
      auto K = head_mat(kn->value, b, h, Lk);
      auto V = head_mat(vn->value, b, h, Lk);
      RowMat S = (Q * K.transpose()) * sc;  // [Lq, Lk]
      if (mn)
        for (long i = 0; i < Lq; ++i)
          for (long j = 0; j < Lk; ++j) S(i, j) += mn->value[b * Lk + j];
      // Row softmax with max subtraction.
      double* W = weights->data() + ((b * num_heads + h) * Lq) * Lk;
      for (long i = 0; i < Lq; ++i) {
        double mx = S.row(i).maxCoeff();
        double denom = 0.0;
        for (long j = 0; j < Lk; ++j) {
          const double e = std::exp(S(i, j) - mx);
          W[i * Lk + j] = e;
          denom += e;
        }
        for (long j = 0; j < Lk; ++j) W[i * Lk + j] /= denom;
      }
      ConstMatMap Wm(W, Lq, Lk);
      RowMat O = Wm * V;  // [Lq, dh]
      for (long i = 0; i < Lq; ++i)
        for (long d = 0; d < dh; ++d) on->value[(b * Lq + i) * H + h * dh + d] = O(i, d);
    }
  }

  if (out.requires_grad()) {
    out.node()->backward_fn = [qn, kn, vn, mn, on, weights, B, Lq, Lk, H, dh, num_heads, sc]() {
      if (qn->requires_grad) qn->ensure_grad();
      if (kn->requires_grad) kn->ensure_grad();
      if (vn->requires_grad) vn->ensure_grad();
      if (mn && mn->requires_grad) mn->ensure_grad();
      RowMat dO(Lq, dh), dW(Lq, Lk), dS(Lq, Lk);
      for (long b = 0; b < B; ++b) {
        for (long h = 0; h < num_heads; ++h) {
          auto Q = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>(
              qn->value.data() + b * Lq * H + h * dh, Lq, dh, Eigen::OuterStride<>(H));
          auto K = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>(
              kn->value.data() + b * Lk * H + h * dh, Lk, dh, Eigen::OuterStride<>(H));
          auto V = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>(
              vn->value.data() + b * Lk * H + h * dh, Lk, dh, Eigen::OuterStride<>(H));
          ConstMatMap Wm(weights->data() + ((b * num_heads + h) * Lq) * Lk, Lq, Lk);
          for (long i = 0; i < Lq; ++i)
            for (long d = 0; d < dh; ++d) dO(i, d) = on->grad[(b * Lq + i) * H + h * dh + d];
          dW.noalias() = dO * V.transpose();
          // Softmax backward per row: dS = W ∘ (dW - rowsum(dW ∘ W)).
          for (long i = 0; i < Lq; ++i) {
            const double dot = (dW.row(i).array() * Wm.row(i).array()).sum();
            for (long j = 0; j < Lk; ++j) dS(i, j) = Wm(i, j) * (dW(i, j) - dot);
          }
          if (vn->requires_grad) {
            RowMat dV = Wm.transpose() * dO;
            for (long j = 0; j < Lk; ++j)
              for (long d = 0; d < dh; ++d) vn->grad[(b * Lk + j) * H + h * dh + d] += dV(j, d);
          }
          if (qn->requires_grad) {
            RowMat dQ = (dS * K) * sc;
            for (long i = 0; i < Lq; ++i)
              for (long d = 0; d < dh; ++d) qn->grad[(b * Lq + i) * H + h * dh + d] += dQ(i, d);
          }
          if (kn->requires_grad) {
            RowMat dK = (dS.transpose() * Q) * sc;
            for (long j = 0; j < Lk; ++j)
              for (long d = 0; d < dh; ++d) kn->grad[(b * Lk + j) * H + h * dh + d] += dK(j, d);
          }
          if (mn && mn->requires_grad) {
            for (long j = 0; j < Lk; ++j) {
              double s = 0.0;
              for (long i = 0; i < Lq; ++i) s += dS(i, j);
              mn->grad[b * Lk + j] += s;
            }
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-sample L2 clipping: rows of the [rows, D] view are rescaled so that
// ||row||_2 <= max_norm. Rows already inside the ball pass through unchanged.
// Clipped rows are shaved by (1 - 1e-12) so that downstream exact-bound
// assertions survive rounding in norm measurement.
// ---------------------------------------------------------------------------

inline Tensor clip_rows(const Tensor& x, long rows, double max_norm) {
  check_contract(max_norm > 0.0, "clip_rows: max_norm must be positive");
  check_contract(x.numel() % rows == 0, "clip_rows: rows does not divide numel");
  const long D = x.numel() / rows;
  Tensor out = detail::make_result(x.shape(), {x.node()});
  auto *xn = x.node().get(), *on = out.node().get();
  auto scales = std::make_shared<std::vector<double>>(rows, 1.0);
  auto norms = std::make_shared<std::vector<double>>(rows, 0.0);
  for (long r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (long j = 0; j < D; ++j) ss += xn->value[r * D + j] * xn->value[r * D + j];
    const double norm = std::sqrt(ss);
    (*norms)[r] = norm;
    double s = 1.0;
    if (norm > max_norm) s = max_norm / norm * (1.0 - 1e-12);
    (*scales)[r] = s;
    for (long j = 0; j < D; ++j) on->value[r * D + j] = xn->value[r * D + j] * s;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [xn, on, scales, norms, rows, D]() {
      xn->ensure_grad();
      for (long r = 0; r < rows; ++r) {
        const double s = (*scales)[r];
        if (s == 1.0) {
          for (long j = 0; j < D; ++j) xn->grad[r * D + j] += on->grad[r * D + j];
        } else {
          // y = c x / ||x||  =>  dx = (c/||x||)(g - x̂ (x̂·g))
          const double norm = (*norms)[r];
          double dot = 0.0;
          for (long j = 0; j < D; ++j) dot += on->grad[r * D + j] * xn->value[r * D + j];
          dot /= (norm * norm);
          for (long j = 0; j < D; ++j)
            xn->grad[r * D + j] += s * (on->grad[r * D + j] - xn->value[r * D + j] * dot);
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  Tensor out = detail::make_result({1}, {x.node()});
  auto *xn = x.node().get(), *on = out.node().get();
  double s = 0.0;
  for (double v : xn->value) s += v;
  on->value[0] = s;
  if (out.requires_grad()) {
    out.node()->backward_fn = [xn, on]() {
      xn->ensure_grad();
      for (auto& g : xn->grad) g += on->grad[0];
    };
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) { return scale(sum(x), 1.0 / x.numel()); }

// Mean squared error against a constant target vector.
inline Tensor mse_loss(const Tensor& pred, const std::vector<double>& target) {
  check_dim(pred.numel() == static_cast<long>(target.size()), "mse_loss: size mismatch");
  Tensor out = detail::make_result({1}, {pred.node()});
  auto *pn = pred.node().get(), *on = out.node().get();
  const long n = pred.numel();
  double s = 0.0;
  for (long i = 0; i < n; ++i) {
    const double d = pn->value[i] - target[i];
    s += d * d;
  }
  on->value[0] = s / n;
  if (out.requires_grad()) {
    auto tgt = std::make_shared<std::vector<double>>(target);
    out.node()->backward_fn = [pn, on, tgt, n]() {
      pn->ensure_grad();
      const double g = on->grad[0] * 2.0 / n;
      for (long i = 0; i < n; ++i) pn->grad[i] += g * (pn->value[i] - (*tgt)[i]);
    };
  }
  return out;
}

// Mean cross entropy of logits [B, C] against integer labels.
inline Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
  check_dim(logits.rank() == 2, "cross_entropy_loss: logits must be [B,C]");
  const long B = logits.dim(0), C = logits.dim(1);
  check_dim(B == static_cast<long>(labels.size()), "cross_entropy_loss: label count mismatch");
  Tensor out = detail::make_result({1}, {logits.node()});
  auto *ln = logits.node().get(), *on = out.node().get();
  auto probs = std::make_shared<std::vector<double>>(B * C);
  double total = 0.0;
  for (long b = 0; b < B; ++b) {
    check_contract(labels[b] >= 0 && labels[b] < C, "cross_entropy_loss: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (long c = 0; c < C; ++c) mx = std::max(mx, ln->value[b * C + c]);
    double denom = 0.0;
    for (long c = 0; c < C; ++c) denom += std::exp(ln->value[b * C + c] - mx);
    const double log_denom = std::log(denom) + mx;
    for (long c = 0; c < C; ++c) (*probs)[b * C + c] = std::exp(ln->value[b * C + c] - log_denom);
    total += log_denom - ln->value[b * C + labels[b]];
  }
  on->value[0] = total / B;
  if (out.requires_grad()) {
    auto lab = std::make_shared<std::vector<int>>(labels);
    out.node()->backward_fn = [ln, on, probs, lab, B, C]() {
      ln->ensure_grad();
      const double g = on->grad[0] / B;
      for (long b = 0; b < B; ++b)
        for (long c = 0; c < C; ++c)
          ln->grad[b * C + c] += g * ((*probs)[b * C + c] - (c == (*lab)[b] ? 1.0 : 0.0));
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
  check_contract(loss.numel() == 1, "backward: loss must be scalar");
  if (!loss.requires_grad()) return;

  // Collect the reachable subgraph, then replay in reverse creation order;
  // creation order is topological, so each node's closure runs exactly once
  // with its output gradient fully accumulated.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<TensorNode*> stack = {loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    TensorNode* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.push_back(p.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const TensorNode* a, const TensorNode* b) { return a->serial > b->serial; });

  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (TensorNode* n : order)
    if (n->backward_fn) n->backward_fn();
}

}  // namespace fetsim

#pragma once

// Parameter-holding layers on top of the tensor tape: linear maps, MLPs,
// layer norm, multi-head attention and the transformer blocks used by the
// encoders/decoder. Initialization is uniform fan-in scaling throughout.

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "fetsim/tensor.hpp"

namespace fetsim {

// Named parameter registry; names feed the checkpoint format.
struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(const std::string& name, const Tensor& t) { items.emplace_back(name, t); }
  void merge(const ParamSet& other, const std::string& prefix) {
    for (const auto& [n, t] : other.items) items.emplace_back(prefix + "." + n, t);
  }
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(items.size());
    for (const auto& [n, t] : items) out.push_back(t);
    return out;
  }
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  // init_scale shrinks the fan-in bound; output heads use it so fresh models
  // start near the uniform prediction.
  Linear(long in, long out, Rng& rng, double init_scale = 1.0) {
    const double bound = init_scale / std::sqrt(static_cast<double>(in));
    weight = Tensor::uniform({in, out}, rng, -bound, bound, /*requires_grad=*/true);
    bias = Tensor::uniform({out}, rng, -bound, bound, /*requires_grad=*/true);
  }

  Tensor forward(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

  void collect(ParamSet& ps, const std::string& prefix) const {
    ps.add(prefix + ".weight", weight);
    ps.add(prefix + ".bias", bias);
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  LayerNorm() = default;
  explicit LayerNorm(long dim) {
    gain = Tensor::full({dim}, 1.0, /*requires_grad=*/true);
    bias = Tensor::zeros({dim}, /*requires_grad=*/true);
  }

  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }

  void collect(ParamSet& ps, const std::string& prefix) const {
    ps.add(prefix + ".gain", gain);
    ps.add(prefix + ".bias", bias);
  }
};

// Plain feed-forward stack with ReLU between hidden layers.
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(long in, const std::vector<long>& hidden, long out, Rng& rng, double head_scale = 1.0) {
    long prev = in;
    for (long h : hidden) {
      layers.emplace_back(prev, h, rng);
      prev = h;
    }
    layers.emplace_back(prev, out, rng, head_scale);
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = x;
    for (size_t i = 0; i < layers.size(); ++i) {
      h = layers[i].forward(h);
      if (i + 1 < layers.size()) h = relu(h);
    }
    return h;
  }

  void collect(ParamSet& ps, const std::string& prefix) const {
    for (size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(ps, prefix + ".fc" + std::to_string(i));
  }
};

struct MultiHeadAttention {
  long num_heads = 1;
  Linear wq, wk, wv, wo;

  MultiHeadAttention() = default;
  // kv_dim lets the key/value stream live in a wider space than the queries
  // (used by the concat aggregator).
  MultiHeadAttention(long hidden, long heads, Rng& rng, long kv_dim = 0)
      : num_heads(heads),
        wq(hidden, hidden, rng),
        wk(kv_dim > 0 ? kv_dim : hidden, hidden, rng),
        wv(kv_dim > 0 ? kv_dim : hidden, hidden, rng),
        wo(hidden, hidden, rng) {
    check_contract(hidden % heads == 0, "attention hidden size must divide by heads");
  }

  Tensor forward(const Tensor& query, const Tensor& memory, const Tensor* key_logits = nullptr) const {
    Tensor q = wq.forward(query);
    Tensor k = wk.forward(memory);
    Tensor v = wv.forward(memory);
    Tensor ctx = attention(q, k, v, num_heads, key_logits);
    return wo.forward(ctx);
  }

  void collect(ParamSet& ps, const std::string& prefix) const {
    wq.collect(ps, prefix + ".wq");
    wk.collect(ps, prefix + ".wk");
    wv.collect(ps, prefix + ".wv");
    wo.collect(ps, prefix + ".wo");
  }
};

// Elementwise dropout on the residual branches; active only when a rate and a
// training-time RNG are supplied.
struct BlockDropout {
  double rate = 0.0;
  bool training = false;
  Rng* rng = nullptr;

  Tensor apply(const Tensor& x) const {
    if (rate <= 0.0 || !training || !rng) return x;
    return dropout(x, rate, training, *rng);
  }
};

// Post-norm encoder block: x = LN(x + SelfAttn(x)); x = LN(x + FFN(x)).
struct EncoderBlock {
  MultiHeadAttention attn;
  LayerNorm norm1, norm2;
  Linear ff1, ff2;

  EncoderBlock() = default;
  EncoderBlock(long hidden, long heads, long ff_hidden, Rng& rng)
      : attn(hidden, heads, rng),
        norm1(hidden),
        norm2(hidden),
        ff1(hidden, ff_hidden, rng),
        ff2(ff_hidden, hidden, rng) {}

  Tensor forward(const Tensor& x, const Tensor* key_logits = nullptr,
                 const BlockDropout& drop = {}) const {
    Tensor h = norm1.forward(add(x, drop.apply(attn.forward(x, x, key_logits))));
    Tensor f = ff2.forward(relu(ff1.forward(h)));
    return norm2.forward(add(h, drop.apply(f)));
  }

  void collect(ParamSet& ps, const std::string& prefix) const {
    attn.collect(ps, prefix + ".attn");
    norm1.collect(ps, prefix + ".norm1");
    norm2.collect(ps, prefix + ".norm2");
    ff1.collect(ps, prefix + ".ff1");
    ff2.collect(ps, prefix + ".ff2");
  }
};

// Post-norm decoder block with self attention, cross attention over an
// external memory (optionally with additive key logits) and a feed-forward.
struct DecoderBlock {
  MultiHeadAttention self_attn;
  MultiHeadAttention cross_attn;
  LayerNorm norm1, norm2, norm3;
  Linear ff1, ff2;

  DecoderBlock() = default;
  DecoderBlock(long hidden, long heads, long ff_hidden, Rng& rng, long memory_dim = 0)
      : self_attn(hidden, heads, rng),
        cross_attn(hidden, heads, rng, memory_dim),
        norm1(hidden),
        norm2(hidden),
        norm3(hidden),
        ff1(hidden, ff_hidden, rng),
        ff2(ff_hidden, hidden, rng) {}

  Tensor forward(const Tensor& x, const Tensor& memory, const Tensor* key_logits = nullptr,
                 const BlockDropout& drop = {}) const {
    Tensor h = norm1.forward(add(x, drop.apply(self_attn.forward(x, x))));
    h = norm2.forward(add(h, drop.apply(cross_attn.forward(h, memory, key_logits))));
    Tensor f = ff2.forward(relu(ff1.forward(h)));
    return norm3.forward(add(h, drop.apply(f)));
  }

  void collect(ParamSet& ps, const std::string& prefix) const {
    self_attn.collect(ps, prefix + ".self_attn");
    cross_attn.collect(ps, prefix + ".cross_attn");
    norm1.collect(ps, prefix + ".norm1");
    norm2.collect(ps, prefix + ".norm2");
    norm3.collect(ps, prefix + ".norm3");
    ff1.collect(ps, prefix + ".ff1");
    ff2.collect(ps, prefix + ".ff2");
  }
};

// ---------------------------------------------------------------------------
// Optimizer: plain SGD with decoupled weight decay by default; the adam flag
// switches to Adam moments on the same update API.
// ---------------------------------------------------------------------------

struct Optimizer {
  enum class Kind { sgd, adam };

  Kind kind = Kind::sgd;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void step(const std::vector<Tensor>& params) {
    ++t_;
    for (const Tensor& p : params) {
      check_contract(p.has_grad(), "optimizer step: parameter has no gradient");
      auto* n = p.node().get();
      if (kind == Kind::sgd) {
        for (size_t i = 0; i < n->value.size(); ++i)
          n->value[i] -= lr * (n->grad[i] + weight_decay * n->value[i]);
      } else {
        auto& st = moments_[n];
        if (st.m.size() != n->value.size()) {
          st.m.assign(n->value.size(), 0.0);
          st.v.assign(n->value.size(), 0.0);
        }
        const double bc1 = 1.0 - std::pow(beta1, t_);
        const double bc2 = 1.0 - std::pow(beta2, t_);
        for (size_t i = 0; i < n->value.size(); ++i) {
          st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * n->grad[i];
          st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * n->grad[i] * n->grad[i];
          const double mhat = st.m[i] / bc1;
          const double vhat = st.v[i] / bc2;
          n->value[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * n->value[i]);
        }
      }
      // Deallocate rather than zero: participation is tracked by grad
      // presence, so parties dropped from a step take no update at all.
      n->grad.clear();
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  std::unordered_map<TensorNode*, Moments> moments_;
  long t_ = 0;
};

// The plain SGD update: p <- p - lr*(grad + wd*p), grads cleared.
inline void sgd_step(const std::vector<Tensor>& params, double lr, double weight_decay) {
  for (const Tensor& p : params) {
    check_contract(p.has_grad(), "sgd_step: parameter has no gradient");
    auto* n = p.node().get();
    for (size_t i = 0; i < n->value.size(); ++i)
      n->value[i] -= lr * (n->grad[i] + weight_decay * n->value[i]);
    n->grad.clear();
  }
}

}  // namespace fetsim

#pragma once

// Multi-dimensional positional encoding for identifier vectors: fixed
// per-key-dimension sinusoids (log-spaced frequencies spanning [1e0, 1e4])
// plus a learnable residual linear map, zero-initialized so a fresh encoder
// reproduces the sinusoidal base exactly. The learnable part is what the
// periodic cross-party averaging operates on.

#include <cmath>
#include <string>
#include <vector>

#include "fetsim/common.hpp"
#include "fetsim/nn.hpp"
#include "fetsim/tensor.hpp"

namespace fetsim {

struct PositionalEncoder {
  long key_dims = 0;
  long hidden = 0;
  std::vector<double> frequencies;
  Tensor proj_weight;  // [H, H], zero-init
  Tensor proj_bias;    // [H], zero-init

  PositionalEncoder() = default;
  PositionalEncoder(long key_dims_, long hidden_) : key_dims(key_dims_), hidden(hidden_) {
    check_contract(key_dims >= 1 && hidden >= 1, "positional encoder: bad dimensions");
    const long per_dim = (hidden + 2 * key_dims - 1) / (2 * key_dims);
    frequencies.resize(per_dim);
    for (long j = 0; j < per_dim; ++j)
      frequencies[j] = per_dim == 1 ? 1.0 : std::pow(10.0, 4.0 * j / (per_dim - 1));
    proj_weight = Tensor::zeros({hidden, hidden}, /*requires_grad=*/true);
    proj_bias = Tensor::zeros({hidden}, /*requires_grad=*/true);
  }

  // Sinusoid features of the keys, truncated to the hidden size; a constant
  // with respect to the tape (keys carry no gradient).
  Tensor base_features(const Tensor& keys) const {
    check_dim(keys.rank() == 3 && keys.dim(2) == key_dims,
              "positional encoder: keys must be [B,L," + std::to_string(key_dims) + "]");
    const long rows = keys.lead();
    const long per_dim = static_cast<long>(frequencies.size());
    std::vector<double> feat(rows * hidden, 0.0);
    for (long r = 0; r < rows; ++r) {
      for (long c = 0; c < key_dims; ++c) {
        const double x = keys.data()[r * key_dims + c];
        for (long j = 0; j < per_dim; ++j) {
          const long base = (c * per_dim + j) * 2;
          const double angle = frequencies[j] * x;
          if (base < hidden) feat[r * hidden + base] = std::sin(angle);
          if (base + 1 < hidden) feat[r * hidden + base + 1] = std::cos(angle);
        }
      }
    }
    Shape out_shape = keys.shape();
    out_shape.back() = hidden;
    return Tensor::from_data(std::move(out_shape), std::move(feat));
  }

  // enc(key) = phi(key) + phi(key) W + b
  Tensor encode(const Tensor& keys) const {
    Tensor phi = base_features(keys);
    return add(phi, add_bias(matmul(phi, proj_weight), proj_bias));
  }

  void collect(ParamSet& ps, const std::string& prefix) const {
    ps.add(prefix + ".proj_weight", proj_weight);
    ps.add(prefix + ".proj_bias", proj_bias);
  }
};

// Elementwise mean of the learnable parameters, installed back into every
// layer (the broadcast step). Layers must be structurally identical.
inline void pe_average(const std::vector<PositionalEncoder*>& layers) {
  check_contract(!layers.empty(), "pe_average: no layers");
  const auto* first = layers.front();
  for (const auto* l : layers) {
    check_contract(l->key_dims == first->key_dims && l->hidden == first->hidden &&
                       l->frequencies == first->frequencies,
                   "pe_average: structural mismatch across parties");
  }
  const double inv = 1.0 / layers.size();
  std::vector<double> wmean(first->proj_weight.numel(), 0.0);
  std::vector<double> bmean(first->proj_bias.numel(), 0.0);
  for (const auto* l : layers) {
    for (size_t i = 0; i < wmean.size(); ++i) wmean[i] += l->proj_weight.data()[i] * inv;
    for (size_t i = 0; i < bmean.size(); ++i) bmean[i] += l->proj_bias.data()[i] * inv;
  }
  for (auto* l : layers) {
    l->proj_weight.data() = wmean;
    l->proj_bias.data() = bmean;
  }
}

}  // namespace fetsim

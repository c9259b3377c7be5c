#pragma once

// The SplitAvg privacy layer: per-sample representation norm clipping to C/k,
// distributed Gaussian noise calibrated so the noise SUM has per-coordinate
// variance exactly C^2 sigma^2, and aggregation by dropout-corrected mean,
// optionally through the simulated secure summation so the aggregator only
// ever observes the aggregate.

#include <cmath>
#include <string>
#include <vector>

#include "fetsim/common.hpp"
#include "fetsim/mpc.hpp"
#include "fetsim/rng.hpp"
#include "fetsim/tensor.hpp"

namespace fetsim {

struct PrivacySpec {
  double epsilon = 0.0;          // budget cap; 0 disables the cap
  double delta = 1e-5;
  double noise_multiplier = 0.0; // sigma
  double clip_norm = 1.0;        // C
  double subsample_rate = 1.0;   // q
  int num_parties = 1;           // k secondary parties
  bool enabled = false;
  bool use_mpc = true;
  bool noise_at_eval = true;     // representations leave the parties at eval too

  void validate() const {
    check_contract(delta > 0.0 && delta < 1.0, "privacy: delta must lie in (0,1)");
    check_contract(subsample_rate > 0.0 && subsample_rate <= 1.0,
                   "privacy: subsample rate must lie in (0,1]");
    if (enabled) {
      check_contract(noise_multiplier > 0.0, "privacy: enabled requires sigma > 0");
      check_contract(clip_norm > 0.0, "privacy: enabled requires clip norm > 0");
    }
  }
};

// Per-sample clip of a [B, L, H] representation to norm C/k over the
// flattened L*H coordinates. Direction is preserved; samples already inside
// the ball pass through unchanged.
inline Tensor clip_representation(const Tensor& rep, double clip_norm, int num_parties) {
  check_contract(clip_norm > 0.0 && num_parties >= 1, "clip_representation: bad arguments");
  check_dim(rep.rank() == 3, "clip_representation: expected [B,L,H]");
  return clip_rows(rep, rep.dim(0), clip_norm / num_parties);
}

// (eps, delta) -> (q*eps, q*delta) under subsampling at rate q.
inline std::pair<double, double> amplify_by_subsampling(double eps, double delta, double q) {
  check_contract(q > 0.0 && q <= 1.0, "amplify_by_subsampling: q out of range");
  return {q * eps, q * delta};
}

// Dropout-corrected mean of the active parties' clipped representations plus
// the distributed noise: each active party draws per-coordinate
// N(0, C^2 sigma^2 / k_active) so the noise sum carries variance C^2 sigma^2.
// With MPC on, the mean is computed through fixed-point secret sharing and the
// smooth tape path only supplies gradients (straight-through on the value).
//
// noise_streams: one RNG per active party, or nullptr to skip noise (privacy
// disabled or eval with noise_at_eval=false).
inline Tensor secure_aggregate(const std::vector<Tensor>& clipped, const PrivacySpec& spec,
                               std::vector<Rng>* noise_streams,
                               mpc::Transcript* transcript = nullptr) {
  const int active = static_cast<int>(clipped.size());
  check_contract(active >= 1, "secure_aggregate: zero active parties");
  for (const auto& t : clipped)
    check_dim(t.shape() == clipped[0].shape(), "secure_aggregate: shape mismatch across parties");

  if (!spec.enabled) {
    // Exact arithmetic mean; no clipping assumptions, no MPC.
    Tensor total = weighted_sum(clipped, std::vector<double>(active, 1.0));
    return scale(total, 1.0 / active);
  }

  // Appendix-A style bound: the clipped sum stays inside the C ball per
  // sample, checked before any noise enters.
  {
    const long batch = clipped[0].dim(0);
    const long per_sample = clipped[0].numel() / batch;
    std::vector<double> acc(per_sample);
    for (long b = 0; b < batch; ++b) {
      double ss = 0.0;
      acc.assign(per_sample, 0.0);
      for (int h = 0; h < active; ++h) {
        const auto& v = clipped[h].data();
        for (long j = 0; j < per_sample; ++j) acc[j] += v[b * per_sample + j];
      }
      for (long j = 0; j < per_sample; ++j) ss += acc[j] * acc[j];
      if (std::sqrt(ss) > spec.clip_norm)
        throw NumericError("secure_aggregate: clipped sum escaped the sensitivity ball (|sum| = " +
                           std::to_string(std::sqrt(ss)) + " > C = " +
                           std::to_string(spec.clip_norm) + ")");
    }
  }

  std::vector<Tensor> noisy = clipped;
  if (noise_streams) {
    check_contract(noise_streams->size() == clipped.size(),
                   "secure_aggregate: one noise stream per active party");
    const double per_party_std =
        spec.clip_norm * spec.noise_multiplier / std::sqrt(static_cast<double>(active));
    for (int h = 0; h < active; ++h) {
      Tensor noise = Tensor::randn(clipped[h].shape(), (*noise_streams)[h], per_party_std);
      noisy[h] = add(clipped[h], noise);
    }
  }

  Tensor total = weighted_sum(noisy, std::vector<double>(active, 1.0));
  Tensor mean = scale(total, 1.0 / active);

  if (spec.use_mpc) {
    // Value from the fixed-point protocol, gradient through the smooth mean.
    std::vector<mpc::ShareVector> shares;
    shares.reserve(active);
    const int holders = std::max(active, 2);
    Rng share_rng = noise_streams && !noise_streams->empty()
                        ? (*noise_streams)[0].stream(0x6d7063ULL)
                        : Rng(0x6d7063ULL);
    for (int h = 0; h < active; ++h)
      shares.push_back(mpc::share(mpc::encode(noisy[h].data()), holders, share_rng));
    const auto summed = mpc::decode(mpc::secure_sum(shares, transcript));
    std::vector<double> correction(mean.numel());
    for (long i = 0; i < mean.numel(); ++i)
      correction[i] = summed[i] / active - mean.data()[i];
    return add(mean, Tensor::from_data(mean.shape(), std::move(correction)));
  }
  return mean;
}

}  // namespace fetsim

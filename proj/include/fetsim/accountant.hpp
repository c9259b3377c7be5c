#pragma once

// Differential-privacy accounting:
//   * analytic Gaussian mechanism calibration (bisection on the Phi-condition),
//   * composition of subsampled Gaussian mechanisms via numerically computed
//     log-moment (Renyi) bounds at integer orders 2..256,
//   * the epsilon-sigma curve comparing aggregated accounting against
//     per-party accounting (no secure aggregation: k releases per step).
//
// Sigma throughout is the noise multiplier: noise stddev / L2 sensitivity.

#include <cmath>
#include <limits>
#include <vector>

#include "fetsim/common.hpp"

namespace fetsim::dp {

inline double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Smallest delta for which Gaussian noise sigma gives (eps, delta)-DP at the
// given L2 sensitivity:
//   Phi(D/(2s) - eps*s/D) - e^eps * Phi(-D/(2s) - eps*s/D)
inline double gaussian_mechanism_delta(double eps, double sigma, double sensitivity) {
  check_contract(sigma > 0.0 && sensitivity > 0.0, "gaussian_mechanism_delta: bad arguments");
  const double a = sensitivity / (2.0 * sigma);
  const double b = eps * sigma / sensitivity;
  return standard_normal_cdf(a - b) - std::exp(eps) * standard_normal_cdf(-a - b);
}

// Smallest sigma (to within the bisection resolution) whose delta is <= the
// target. The condition is monotone decreasing in sigma; brackets [1e-3, 1e3].
inline double analytic_gaussian_sigma(double eps, double delta, double sensitivity) {
  check_contract(eps > 0.0 && delta > 0.0 && delta < 1.0 && sensitivity > 0.0,
                 "analytic_gaussian_sigma: bad arguments");
  double lo = 1e-3 * sensitivity, hi = 1e3 * sensitivity;
  if (gaussian_mechanism_delta(eps, lo, sensitivity) <= delta) return lo;
  if (gaussian_mechanism_delta(eps, hi, sensitivity) > delta)
    throw NumericError("analytic_gaussian_sigma: no solution inside bisection bracket");
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (gaussian_mechanism_delta(eps, mid, sensitivity) > delta)
      lo = mid;
    else
      hi = mid;
  }
  return hi;
}

// Epsilon achieved by a single Gaussian release at a given sigma (inverse of
// the Phi-condition in eps).
inline double analytic_gaussian_epsilon(double sigma, double delta, double sensitivity = 1.0) {
  double lo = 0.0, hi = 1.0;
  while (gaussian_mechanism_delta(hi, sigma, sensitivity) > delta) {
    hi *= 2.0;
    if (hi > 1e6) return std::numeric_limits<double>::infinity();
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (gaussian_mechanism_delta(mid, sigma, sensitivity) > delta)
      lo = mid;
    else
      hi = mid;
  }
  return hi;
}

namespace detail {

inline double log_sum_exp(const std::vector<double>& xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline double log_binomial(long n, long k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace detail

// Renyi divergence of order alpha (integer >= 2) for one subsampled Gaussian
// release at sampling rate q and noise multiplier sigma:
//   (1/(alpha-1)) * log sum_j C(alpha,j) (1-q)^(alpha-j) q^j e^{j(j-1)/(2 sigma^2)}
inline double subsampled_gaussian_rdp(double q, double sigma, long alpha) {
  check_contract(q > 0.0 && q <= 1.0, "subsampled_gaussian_rdp: q out of range");
  check_contract(alpha >= 2, "subsampled_gaussian_rdp: alpha must be >= 2");
  if (sigma <= 0.0) return std::numeric_limits<double>::infinity();
  const double log_q = std::log(q);
  const double log_1mq = q < 1.0 ? std::log1p(-q) : -std::numeric_limits<double>::infinity();
  std::vector<double> terms;
  terms.reserve(alpha + 1);
  for (long j = 0; j <= alpha; ++j) {
    double t = detail::log_binomial(alpha, j) + j * log_q +
               j * (j - 1) / (2.0 * sigma * sigma);
    if (j < alpha) {
      if (q >= 1.0) continue;  // (1-q)^(alpha-j) vanishes
      t += (alpha - j) * log_1mq;
    }
    terms.push_back(t);
  }
  return detail::log_sum_exp(terms) / (alpha - 1);
}

// RDP -> (eps, delta) conversion:
//   eps = rdp + log((alpha-1)/alpha) - (log(delta) + log(alpha)) / (alpha - 1)
inline double rdp_to_epsilon(double rdp_total, long alpha, double delta) {
  if (!std::isfinite(rdp_total)) return std::numeric_limits<double>::infinity();
  return rdp_total + std::log((alpha - 1.0) / alpha) -
         (std::log(delta) + std::log(static_cast<double>(alpha))) / (alpha - 1.0);
}

constexpr long kMinOrder = 2;
constexpr long kMaxOrder = 256;
// Anything above this is reported as the infinity sentinel: the noise is too
// small to certify a usable budget at the requested delta.
constexpr double kEpsilonCeiling = 1e6;

enum class AccountingMethod { moments, rdp };

struct AccountantState {
  double sigma = 0.0;           // noise multiplier
  double subsample_rate = 1.0;  // q
  double delta = 1e-5;
  long steps_taken = 0;         // advances by the batch count each epoch
  AccountingMethod method = AccountingMethod::moments;

  void advance(long steps = 1) { steps_taken += steps; }
};

// Epsilon for `steps_taken` compositions of the subsampled Gaussian at rate q,
// optimized over integer orders.
inline double compose_epsilon(const AccountantState& state) {
  if (state.steps_taken <= 0) return 0.0;
  if (state.sigma <= 0.0) return std::numeric_limits<double>::infinity();
  double best = std::numeric_limits<double>::infinity();
  for (long alpha = kMinOrder; alpha <= kMaxOrder; ++alpha) {
    const double rdp = subsampled_gaussian_rdp(state.subsample_rate, state.sigma, alpha);
    const double eps = rdp_to_epsilon(rdp * state.steps_taken, alpha, state.delta);
    best = std::min(best, eps);
  }
  if (!std::isfinite(best) || best > kEpsilonCeiling)
    return std::numeric_limits<double>::infinity();
  return best;
}

inline double compose_epsilon(double sigma, double q, long steps, double delta) {
  AccountantState st;
  st.sigma = sigma;
  st.subsample_rate = q;
  st.delta = delta;
  st.steps_taken = steps;
  return compose_epsilon(st);
}

// Smallest sigma whose composed epsilon stays within the budget; bisection on
// the monotone compose_epsilon.
inline double sigma_for_budget(double eps, double delta, double q, long total_steps) {
  check_contract(eps > 0.0, "sigma_for_budget: eps must be positive");
  double lo = 1e-3, hi = 1e-3;
  // Grow the satisfying end first.
  while (compose_epsilon(hi, q, total_steps, delta) > eps) {
    hi *= 2.0;
    if (hi > 1e9) throw NumericError("sigma_for_budget: no finite sigma satisfies the budget");
  }
  if (compose_epsilon(lo, q, total_steps, delta) <= eps) return lo;
  for (int it = 0; it < 200 && (hi - lo) > 1e-6 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (compose_epsilon(mid, q, total_steps, delta) > eps)
      lo = mid;
    else
      hi = mid;
  }
  return hi;
}

struct CurveRow {
  double sigma = 0.0;
  double eps_with_mpc = 0.0;   // one aggregated release per step
  double eps_rdp_no_mpc = 0.0; // k per-party releases per step
};

// CSV-ready epsilon-sigma table. Without secure aggregation each of the k
// parties' releases is accounted separately, multiplying the effective
// release count by k.
inline std::vector<CurveRow> epsilon_curve(const std::vector<double>& sigmas, double q, long steps,
                                           double delta, int num_parties) {
  std::vector<CurveRow> rows;
  rows.reserve(sigmas.size());
  for (double s : sigmas) {
    CurveRow r;
    r.sigma = s;
    r.eps_with_mpc = compose_epsilon(s, q, steps, delta);
    r.eps_rdp_no_mpc = compose_epsilon(s, q, steps * static_cast<long>(num_parties), delta);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace fetsim::dp

#pragma once

// Independent oracles used by the test suites. Everything here is written
// against plain loops / textbook formulas on purpose: these are the reference
// sides of the dual-route checks and must not share code with the library
// paths they verify.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "fetsim/tensor.hpp"

namespace oracle {

// Triple-loop matrix product.
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        long m, long n, long p) {
  std::vector<double> c(m * p, 0.0);
  for (long i = 0; i < m; ++i)
    for (long k = 0; k < n; ++k)
      for (long j = 0; j < p; ++j) c[i * p + j] += a[i * n + k] * b[k * p + j];
  return c;
}

// Direct exp/sum softmax at extended precision.
inline std::vector<double> naive_softmax(const std::vector<double>& x, long rows, long cols) {
  std::vector<double> y(x.size());
  for (long r = 0; r < rows; ++r) {
    long double denom = 0.0L;
    for (long c = 0; c < cols; ++c) denom += expl(static_cast<long double>(x[r * cols + c]));
    for (long c = 0; c < cols; ++c)
      y[r * cols + c] = static_cast<double>(expl(static_cast<long double>(x[r * cols + c])) / denom);
  }
  return y;
}

// Per-row mean/variance normalization followed by affine, population variance.
inline std::vector<double> naive_layer_norm(const std::vector<double>& x,
                                            const std::vector<double>& gain,
                                            const std::vector<double>& bias, long rows, long cols,
                                            double eps = 1e-5) {
  std::vector<double> y(x.size());
  for (long r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (long c = 0; c < cols; ++c) mean += x[r * cols + c];
    mean /= cols;
    double var = 0.0;
    for (long c = 0; c < cols; ++c) {
      double d = x[r * cols + c] - mean;
      var += d * d;
    }
    var /= cols;
    for (long c = 0; c < cols; ++c)
      y[r * cols + c] = gain[c] * (x[r * cols + c] - mean) / std::sqrt(var + eps) + bias[c];
  }
  return y;
}

// Central finite differences of a scalar function against the analytic
// gradients already stored in `params`. Returns the worst relative error,
// with a small floor in the denominator so true-zero gradients do not blow
// the ratio up on FD noise. A coordinate that fails at the base step is
// re-measured at step/10: a ReLU kink inside the probe interval heals under
// refinement, a genuinely wrong gradient does not.
inline double fd_worst_rel_error(const std::function<double()>& loss_value,
                                 const std::vector<fetsim::Tensor>& params, double step = 1e-4,
                                 double tol = 1e-3) {
  double worst = 0.0;
  for (const auto& p : params) {
    auto* n = p.node().get();
    for (size_t i = 0; i < n->value.size(); ++i) {
      const double analytic = n->grad.size() == n->value.size() ? n->grad[i] : 0.0;
      auto probe = [&](double h) {
        const double saved = n->value[i];
        n->value[i] = saved + h;
        const double up = loss_value();
        n->value[i] = saved - h;
        const double down = loss_value();
        n->value[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-4});
        return std::fabs(numeric - analytic) / denom;
      };
      double err = probe(step);
      if (err >= tol) err = probe(step / 10.0);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// Cyclic Jacobi eigensolver for symmetric matrices; returns eigenvalues
// (descending) and the matching eigenvectors as columns of `vecs`.
inline void jacobi_eigen_sym(std::vector<double> a, long n, std::vector<double>& vals,
                             std::vector<double>& vecs) {
  vecs.assign(n * n, 0.0);
  for (long i = 0; i < n; ++i) vecs[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (long p = 0; p < n; ++p)
      for (long q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-24) break;
    for (long p = 0; p < n; ++p) {
      for (long q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (long k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (long k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (long k = 0; k < n; ++k) {
          const double vkp = vecs[k * n + p], vkq = vecs[k * n + q];
          vecs[k * n + p] = c * vkp - s * vkq;
          vecs[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  vals.resize(n);
  for (long i = 0; i < n; ++i) vals[i] = a[i * n + i];
  // Sort descending by eigenvalue, permuting columns along.
  std::vector<long> idx(n);
  for (long i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](long x, long y) { return vals[x] > vals[y]; });
  std::vector<double> sv(n), svec(n * n);
  for (long i = 0; i < n; ++i) {
    sv[i] = vals[idx[i]];
    for (long k = 0; k < n; ++k) svec[k * n + i] = vecs[k * n + idx[i]];
  }
  vals = std::move(sv);
  vecs = std::move(svec);
}

// Renyi divergence of order alpha for the subsampled Gaussian mechanism,
// computed by direct numerical integration of the likelihood-ratio moment
// (independent of any closed-form binomial expansion):
//   P = (1-q) N(0,s^2) + q N(1,s^2),  Q = N(0,s^2)
//   rdp = max over both directions of (1/(a-1)) log E[(P/Q)^a].
// The integrand spans thousands of orders of magnitude at high alpha, so the
// whole computation lives in log space over a fixed trapezoid grid.
inline double sgm_rdp_by_quadrature(double q, double sigma, double alpha) {
  const double log_pi2 = 0.5 * std::log(2.0 * std::acos(-1.0));
  auto log_q_pdf = [&](double x) { return -0.5 * x * x / (sigma * sigma) - std::log(sigma) - log_pi2; };
  auto log_p_pdf = [&](double x) {
    const double a = std::log1p(-q) + log_q_pdf(x);
    const double z = (x - 1.0) / sigma;
    const double b = std::log(q) - 0.5 * z * z - std::log(sigma) - log_pi2;
    const double mx = std::max(a, b);
    return mx + std::log(std::exp(a - mx) + std::exp(b - mx));
  };
  // log(P/Q) = logaddexp(log(1-q), log q + (2x-1)/(2 s^2)); stable for all x.
  auto log_ratio = [&](double x) {
    const double a = std::log1p(-q);
    const double b = std::log(q) + (2.0 * x - 1.0) / (2.0 * sigma * sigma);
    const double mx = std::max(a, b);
    return mx + std::log(std::exp(a - mx) + std::exp(b - mx));
  };

  // The moment mass lives where the shifted-Gaussian component or the tilted
  // window sits; cover both with margin.
  const double lo = -14.0 * sigma;
  const double hi = std::max(1.0 + 14.0 * sigma, alpha + 14.0 * sigma);
  const long n = 20000;
  const double dx = (hi - lo) / n;
  auto log_trapz = [&](auto&& log_f) {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> vals(n + 1);
    for (long i = 0; i <= n; ++i) {
      const double w = (i == 0 || i == n) ? 0.5 : 1.0;
      vals[i] = log_f(lo + i * dx) + std::log(w);
      mx = std::max(mx, vals[i]);
    }
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double v : vals) s += std::exp(v - mx);
    return mx + std::log(s) + std::log(dx);
  };

  const double log_m1 = log_trapz([&](double x) { return alpha * log_ratio(x) + log_q_pdf(x); });
  const double log_m2 = log_trapz([&](double x) { return -alpha * log_ratio(x) + log_p_pdf(x); });
  return std::max(log_m1, log_m2) / (alpha - 1.0);
}

}  // namespace oracle

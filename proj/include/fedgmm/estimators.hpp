#pragma once

// Closed-form estimators of the mixing weight and the error-bound evaluator.
//
// The moment estimator follows from E[X_t] = (2w-1) mu_t:
//
//   w_hat = (1/2) (1 + mu_t' xbar_t / ||mu_t||^2),  clipped to [0, 1].
//
// Its MSE is exactly w(1-w)/n + 1/(4 ||mu_t||^2 n) before clipping; the
// dimension-dependent bound w(1-w)/n + d/(4 ||mu_t||^2 n) dominates it.
// The EM weight iteration (means known) uses responsibilities
// r1(x) = sigma(2 mu_t'x + 2b), whose fixed point is the MLE of w.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

#include "fedgmm/mat.hpp"
#include "fedgmm/mixture.hpp"
#include "fedgmm/rng.hpp"

namespace fedgmm {

struct WeightEstimate {
  double w_hat = 0.0;
  bool clipped = false;
  std::size_t n_used = 0;
  double t_used = std::numeric_limits<double>::quiet_NaN();
};

/// Moment estimator of w from samples of the time-t marginal.
inline WeightEstimate moment_estimate(
    std::span<const double> mu_t, const Matrix& xt_samples,
    double t_used = std::numeric_limits<double>::quiet_NaN()) {
  if (xt_samples.rows == 0)
    throw std::invalid_argument("moment_estimate: need at least one sample");
  if (mu_t.size() != xt_samples.cols)
    throw std::invalid_argument("moment_estimate: dimension mismatch");
  const double norm_sq = norm2_sq(mu_t);
  if (norm_sq < 1e-12)
    throw std::invalid_argument(
        "moment_estimate: ||mu_t||^2 < 1e-12; t is too large for estimation");
  double proj = 0.0;
  for (std::size_t i = 0; i < xt_samples.rows; ++i)
    proj += dot(mu_t, xt_samples.row(i));
  proj /= static_cast<double>(xt_samples.rows);
  const double raw = 0.5 * (1.0 + proj / norm_sq);
  WeightEstimate est;
  est.n_used = xt_samples.rows;
  est.t_used = t_used;
  est.clipped = raw < 0.0 || raw > 1.0;
  est.w_hat = raw < 0.0 ? 0.0 : (raw > 1.0 ? 1.0 : raw);
  return est;
}

/// E-step responsibilities of the +mu_t component, r1 = sigma(2 mu_t'x + 2b).
inline std::vector<double> em_responsibilities(std::span<const double> mu_t,
                                               double w, const Matrix& x) {
  const double b = weight_to_logit(w);
  std::vector<double> r(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    r[i] = 1.0 / (1.0 + std::exp(-2.0 * (dot(mu_t, x.row(i)) + b)));
  return r;
}

/// M-step for the weight with known means: w+ = mean of responsibilities.
inline double em_weight_step(std::span<const double> mu_t, double w,
                             const Matrix& x) {
  if (x.rows == 0) throw std::invalid_argument("em_weight_step: empty sample");
  const std::vector<double> r = em_responsibilities(mu_t, w, x);
  double s = 0.0;
  for (double v : r) s += v;
  return s / static_cast<double>(x.rows);
}

/// Average log-likelihood of the two-component mixture at time t.
inline double mixture_loglik(std::span<const double> mu_t, double w,
                             const Matrix& x) {
  MixtureParams p{std::vector<double>(mu_t.begin(), mu_t.end()), w};
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows; ++i)
    s += log_density_at_time(p, 0.0, x.row(i));
  return s / static_cast<double>(x.rows);
}

struct EmFit {
  double w = 0.5;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Iterate em_weight_step to the fixed point (scalar iteration, cheap).
inline EmFit em_fit_weight(std::span<const double> mu_t, double w0,
                           const Matrix& x, double tol = 1e-10,
                           std::size_t max_iters = 1000) {
  EmFit fit;
  fit.w = w0;
  for (std::size_t k = 0; k < max_iters; ++k) {
    const double next = em_weight_step(mu_t, fit.w, x);
    ++fit.iterations;
    if (std::abs(next - fit.w) < tol) {
      fit.w = next;
      fit.converged = true;
      return fit;
    }
    fit.w = next;
  }
  return fit;
}

inline double exact_weight_mse(double w, double n, double mu_t_norm_sq) {
  return w * (1.0 - w) / n + 1.0 / (4.0 * mu_t_norm_sq * n);
}

inline double weight_mse_upper_bound(double w, double n, double d,
                                    double mu_t_norm_sq) {
  return w * (1.0 - w) / n + d / (4.0 * mu_t_norm_sq * n);
}

struct BoundReport {
  double empirical_mse = 0.0;
  double upper_bound = 0.0;
  double exact_mse = 0.0;
  std::size_t trials = 0;
  // diagnostics
  std::size_t d = 0;
  std::size_t n = 0;
  double w = 0.0;
  double t = 0.0;
  double mu_t_norm_sq = 0.0;
  double mean_w_hat = 0.0;
  double se_mse = 0.0;
  std::size_t clipped_count = 0;
};

/// Monte-Carlo MSE of the moment estimator over fresh time-t datasets,
/// next to the dimension-dependent upper bound and the exact variance
/// formula. Trials are independently keyed by index and reduced in index
/// order, so the report is identical for any thread count.
inline BoundReport evaluate_weight_mse_bound(const MixtureParams& params,
                                             double t, std::size_t n,
                                             std::size_t trials,
                                             std::uint64_t seed,
                                             int threads = 1) {
  if (trials < 100)
    throw std::invalid_argument("evaluate_weight_mse_bound: trials must be >= 100");
  const std::vector<double> mu_t = mean_at_time(params, t);
  const double norm_sq = norm2_sq(mu_t);
  const std::size_t d = params.dim();

  std::vector<double> sq_err(trials);
  std::vector<double> w_hats(trials);
  std::vector<std::uint8_t> clipped(trials, 0);

  auto run_range = [&](std::size_t lo, std::size_t hi) {
    Matrix buf(n, d);
    MixtureParams at_t{mu_t, params.w};
    for (std::size_t trial = lo; trial < hi; ++trial) {
      RngStream rng = keyed_stream(seed, StreamKind::bound_trial, trial);
      for (std::size_t i = 0; i < n; ++i) {
        const int sign = rng.uniform() < at_t.w ? 1 : -1;
        auto row = buf.row(i);
        for (std::size_t j = 0; j < d; ++j)
          row[j] = sign * mu_t[j] + rng.normal();
      }
      const WeightEstimate est = moment_estimate(mu_t, buf, t);
      const double err = est.w_hat - params.w;
      sq_err[trial] = err * err;
      w_hats[trial] = est.w_hat;
      clipped[trial] = est.clipped ? 1 : 0;
    }
  };

  if (threads <= 1) {
    run_range(0, trials);
  } else {
    const std::size_t nt = static_cast<std::size_t>(threads);
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < nt; ++k) {
      const std::size_t lo = trials * k / nt;
      const std::size_t hi = trials * (k + 1) / nt;
      if (lo < hi) pool.emplace_back(run_range, lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  BoundReport report;
  report.trials = trials;
  report.d = d;
  report.n = n;
  report.w = params.w;
  report.t = t;
  report.mu_t_norm_sq = norm_sq;
  const double nn = static_cast<double>(n);
  report.upper_bound =
      weight_mse_upper_bound(params.w, nn, static_cast<double>(d), norm_sq);
  report.exact_mse = exact_weight_mse(params.w, nn, norm_sq);
  double sum = 0.0, sum_sq = 0.0, sum_w = 0.0;
  std::size_t clipped_total = 0;
  for (std::size_t i = 0; i < trials; ++i) {
    sum += sq_err[i];
    sum_sq += sq_err[i] * sq_err[i];
    sum_w += w_hats[i];
    clipped_total += clipped[i];
  }
  const double m = static_cast<double>(trials);
  report.empirical_mse = sum / m;
  report.mean_w_hat = sum_w / m;
  report.clipped_count = clipped_total;
  const double var = std::max(0.0, sum_sq / m - report.empirical_mse * report.empirical_mse);
  report.se_mse = std::sqrt(var / m);
  return report;
}

}  // namespace fedgmm

#pragma once

// Ground-truth two-component symmetric Gaussian mixture
//
//   q0 = w N(+mu, I) + (1-w) N(-mu, I),   0 <= w <= 1, mu in R^d
//
// pushed through the unit-drift Ornstein-Uhlenbeck noising process
//
//   X_t = e^{-t} X_0 + sqrt(1 - e^{-2t}) Z,   Z ~ N(0, I).
//
// The time-t marginal stays a mixture with the same unit covariance and
// shrunk mean mu_t = e^{-t} mu, which gives closed forms for the density and
// the score. Sign convention used throughout the library:
//
//   u(x)   = mu_t'x + b,   b = (1/2) log(w / (1-w))
//   score  = tanh(u(x)) mu_t - x
//
// and E[tanh(u(X_t))] = 2w - 1 at the true parameters (see
// docs/conventions.md for the identities that pin this convention).

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "fedgmm/mat.hpp"
#include "fedgmm/rng.hpp"

namespace fedgmm {

// tanh/logit paths clamp the weight into [kWeightEps, 1-kWeightEps] so the
// log-odds stay finite; callers can observe the clamp through the flag.
inline constexpr double kWeightEps = 1e-6;

inline double clamp_weight(double w, bool* clamped = nullptr) {
  if (w < kWeightEps) {
    if (clamped) *clamped = true;
    return kWeightEps;
  }
  if (w > 1.0 - kWeightEps) {
    if (clamped) *clamped = true;
    return 1.0 - kWeightEps;
  }
  return w;
}

// b = (1/2) log(w/(1-w)); the per-client bias of the score network.
inline double weight_to_logit(double w, bool* clamped = nullptr) {
  const double wc = clamp_weight(w, clamped);
  return 0.5 * std::log(wc / (1.0 - wc));
}

inline double logit_to_weight(double b) {
  // sigma(2b), written for symmetry of round-off in both tails
  return 1.0 / (1.0 + std::exp(-2.0 * b));
}

/// Shared component mean and per-client mixing weight of the +mu component.
struct MixtureParams {
  std::vector<double> mu;
  double w = 0.5;

  std::size_t dim() const { return mu.size(); }

  void validate() const {
    if (mu.empty()) throw std::invalid_argument("MixtureParams: d must be >= 1");
    if (!all_finite(mu))
      throw std::invalid_argument("MixtureParams: mu must be finite");
    if (!(w >= 0.0 && w <= 1.0))
      throw std::invalid_argument("MixtureParams: w must lie in [0, 1]");
  }
};

/// Time horizon and early cutoff of the score-matching integral; the drift
/// constant is fixed to 1 so alpha(t) = e^{-t}.
struct DiffusionSchedule {
  double t_max = 5.0;
  double t_min = 1e-2;
  double drift = 1.0;

  void validate() const {
    if (!(t_min > 0.0 && t_min < t_max))
      throw std::invalid_argument("DiffusionSchedule: need 0 < t_min < t_max");
    if (drift != 1.0)
      throw std::invalid_argument("DiffusionSchedule: drift is fixed to 1");
  }
};

inline double alpha_at(double t) { return std::exp(-t); }

// beta_t = sqrt(1 - e^{-2t}); expm1 keeps it accurate near t = 0.
inline double beta_at(double t) { return std::sqrt(-std::expm1(-2.0 * t)); }

struct LabeledSamples {
  Matrix x;
  std::vector<int> label;  // +1 for the +mu component, -1 otherwise
};

/// Draw n iid samples from the data distribution q0.
inline LabeledSamples sample_data(const MixtureParams& params, std::size_t n,
                                  RngStream& rng) {
  params.validate();
  if (n < 1) throw std::invalid_argument("sample_data: n must be >= 1");
  const std::size_t d = params.dim();
  LabeledSamples out;
  out.x = Matrix(n, d);
  out.label.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int sign = rng.uniform() < params.w ? 1 : -1;
    out.label[i] = sign;
    auto row = out.x.row(i);
    for (std::size_t j = 0; j < d; ++j)
      row[j] = sign * params.mu[j] + rng.normal();
  }
  return out;
}

/// mu_t = e^{-t} mu.
inline std::vector<double> mean_at_time(const MixtureParams& params, double t) {
  if (t < 0.0) throw std::invalid_argument("mean_at_time: t must be >= 0");
  const double a = alpha_at(t);
  std::vector<double> mu_t(params.mu);
  for (double& v : mu_t) v *= a;
  return mu_t;
}

/// Draw n iid samples from the time-t marginal q_t directly (the mixture
/// with mean mu_t and unit covariance). Distribution-equal to sample_data
/// followed by forward_noise at t, at half the draw count.
inline LabeledSamples sample_at_time(const MixtureParams& params, double t,
                                     std::size_t n, RngStream& rng) {
  MixtureParams at_t{mean_at_time(params, t), params.w};
  return sample_data(at_t, n, rng);
}

struct NoisedBatch {
  Matrix xt;
  Matrix z;  // the exact noise used; the DDPM regression target is -z/beta_t
};

/// X_t = e^{-t} X_0 + beta_t Z, returning both X_t and Z. At t = 0 the
/// output equals x0 exactly while Z is still drawn.
inline NoisedBatch forward_noise(const Matrix& x0, double t, RngStream& rng) {
  if (t < 0.0) throw std::invalid_argument("forward_noise: t must be >= 0");
  const double a = alpha_at(t);
  const double b = beta_at(t);
  NoisedBatch out;
  out.xt = Matrix(x0.rows, x0.cols);
  out.z = Matrix(x0.rows, x0.cols);
  for (std::size_t i = 0; i < x0.a.size(); ++i) {
    const double z = rng.normal();
    out.z.a[i] = z;
    out.xt.a[i] = a * x0.a[i] + b * z;
  }
  return out;
}

// log N(x; m, I) up to full normalization
inline double log_gaussian(std::span<const double> x, std::span<const double> m) {
  constexpr double kLogTwoPi = 1.8378770664093454836;
  double q = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double r = x[j] - m[j];
    q += r * r;
  }
  return -0.5 * (static_cast<double>(x.size()) * kLogTwoPi + q);
}

/// log q_t(x), evaluated in log-sum-exp form. Degenerate weights (w = 0 or
/// w = 1) reduce exactly to the single-Gaussian log density: the vanished
/// component enters as exp(-inf) = 0, so no clamping is applied here.
inline double log_density_at_time(const MixtureParams& params, double t,
                                  std::span<const double> x) {
  if (t < 0.0) throw std::invalid_argument("log_density_at_time: t >= 0");
  const std::vector<double> mu_t = mean_at_time(params, t);
  std::vector<double> neg_mu_t(mu_t);
  for (double& v : neg_mu_t) v = -v;
  const double lw = std::log(params.w);          // -inf at w = 0 is fine
  const double lnw = std::log1p(-params.w);      // -inf at w = 1 is fine
  const double a = lw + log_gaussian(x, mu_t);
  const double b = lnw + log_gaussian(x, neg_mu_t);
  const double hi = std::max(a, b);
  if (hi == -std::numeric_limits<double>::infinity()) return hi;
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

/// Exact score of q_t at x, written into `out`:
///   tanh(mu_t'x + b) mu_t - x,  b = (1/2) log(w/(1-w)).
/// The weight is clamped into the open interval for the logit.
inline void true_score_into(const MixtureParams& params, double t,
                            std::span<const double> x, std::span<double> out,
                            bool* clamped = nullptr) {
  if (t < 0.0) throw std::invalid_argument("true_score: t must be >= 0");
  const double a = alpha_at(t);
  const double b = weight_to_logit(params.w, clamped);
  double u = b;
  for (std::size_t j = 0; j < x.size(); ++j) u += a * params.mu[j] * x[j];
  const double th = std::tanh(u);
  for (std::size_t j = 0; j < x.size(); ++j)
    out[j] = th * a * params.mu[j] - x[j];
}

inline std::vector<double> true_score(const MixtureParams& params, double t,
                                      std::span<const double> x,
                                      bool* clamped = nullptr) {
  std::vector<double> out(x.size());
  true_score_into(params, t, x, out, clamped);
  return out;
}

}  // namespace fedgmm

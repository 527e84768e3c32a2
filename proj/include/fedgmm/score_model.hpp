#pragma once

// Trainable one-layer conditional score network
//
//   s(x, t) = tanh(mu_hat_t'x + b) mu_hat_t - x,  mu_hat_t = e^{-t} mu_hat,
//
// with the shared mean mu_hat as backbone weights and the scalar logit b as
// the per-client conditioning bias, plus the DDPM regression loss
//
//   L = mean_i || s(xt_i, t_i) + z_i / beta_{t_i} ||^2
//
// and its exact analytic gradients. Row reductions use a fixed summation
// order, so a loss/gradient evaluation is bitwise reproducible.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "fedgmm/mat.hpp"
#include "fedgmm/mixture.hpp"
#include "fedgmm/rng.hpp"

namespace fedgmm {

// Beyond |b| = 10 the tanh is saturated to machine precision and gradients
// vanish; updates clamp the logit here.
inline constexpr double kLogitClamp = 10.0;

struct ScoreParams {
  std::vector<double> mu_hat;
  double logit_hat = 0.0;

  std::size_t dim() const { return mu_hat.size(); }
  double weight() const { return logit_to_weight(logit_hat); }
};

inline double clamp_logit(double b) {
  if (b > kLogitClamp) return kLogitClamp;
  if (b < -kLogitClamp) return -kLogitClamp;
  return b;
}

/// One training batch: clean rows, per-row timesteps, the exact noise draw,
/// and the noised rows xt = e^{-t} x0 + beta_t z. `t_floor` records the
/// schedule's t_min at draw time; the loss rejects rows below it.
struct Minibatch {
  Matrix x0;
  std::vector<double> t;
  Matrix z;
  Matrix xt;
  double t_floor = 0.0;

  std::size_t size() const { return x0.rows; }
  std::size_t dim() const { return x0.cols; }
};

/// iid uniform draws on [t_min, t_max].
inline std::vector<double> sample_timesteps(const DiffusionSchedule& schedule,
                                            std::size_t b, RngStream& rng) {
  schedule.validate();
  if (b < 1) throw std::invalid_argument("sample_timesteps: b must be >= 1");
  std::vector<double> t(b);
  for (double& v : t) v = rng.uniform(schedule.t_min, schedule.t_max);
  return t;
}

/// Draw fresh timesteps and noise for the given clean rows.
inline Minibatch make_minibatch(const Matrix& x0, const DiffusionSchedule& schedule,
                                RngStream& rng) {
  Minibatch batch;
  batch.x0 = x0;
  batch.t = sample_timesteps(schedule, x0.rows, rng);
  batch.z = Matrix(x0.rows, x0.cols);
  batch.xt = Matrix(x0.rows, x0.cols);
  batch.t_floor = schedule.t_min;
  for (std::size_t i = 0; i < x0.rows; ++i) {
    const double a = alpha_at(batch.t[i]);
    const double bt = beta_at(batch.t[i]);
    for (std::size_t j = 0; j < x0.cols; ++j) {
      const double z = rng.normal();
      batch.z(i, j) = z;
      batch.xt(i, j) = a * x0(i, j) + bt * z;
    }
  }
  return batch;
}

inline void predict_score_into(const ScoreParams& p, double t,
                               std::span<const double> x, std::span<double> out) {
  const double a = alpha_at(t);
  double u = p.logit_hat;
  for (std::size_t j = 0; j < x.size(); ++j) u += a * p.mu_hat[j] * x[j];
  const double th = std::tanh(u);
  for (std::size_t j = 0; j < x.size(); ++j)
    out[j] = th * a * p.mu_hat[j] - x[j];
}

inline std::vector<double> predict_score(const ScoreParams& p, double t,
                                         std::span<const double> x) {
  std::vector<double> out(x.size());
  predict_score_into(p, t, x, out);
  return out;
}

struct LossGrads {
  double loss = 0.0;
  double d_logit = 0.0;
  std::vector<double> d_mu;
};

namespace detail {

inline void check_batch(const ScoreParams& p, const Minibatch& batch) {
  if (batch.size() == 0) throw std::invalid_argument("ddpm_loss: empty batch");
  if (batch.dim() != p.dim())
    throw std::invalid_argument("ddpm_loss: dimension mismatch");
  for (double t : batch.t)
    if (t < batch.t_floor)
      throw std::invalid_argument(
          "ddpm_loss: timestep below t_min; the z/beta_t target blows up");
}

}  // namespace detail

/// Loss and both analytic gradients in one pass over the batch.
///
/// Per row, with r = tanh(u) mu_t - xt + z/beta and u = mu_t'xt + b:
///   dL/db  = 2 tanh'(u) mu_t'r
///   dL/dmu = 2 e^{-t} [ tanh(u) r + tanh'(u) (mu_t'r) xt ]
inline LossGrads ddpm_loss_and_grads(const ScoreParams& p, const Minibatch& batch) {
  detail::check_batch(p, batch);
  const std::size_t n = batch.size();
  const std::size_t d = batch.dim();
  LossGrads g;
  g.d_mu.assign(d, 0.0);
  std::vector<double> r(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = batch.t[i];
    const double a = alpha_at(t);
    const double bt = beta_at(t);
    const auto xt = batch.xt.row(i);
    const auto z = batch.z.row(i);
    double u = p.logit_hat;
    for (std::size_t j = 0; j < d; ++j) u += a * p.mu_hat[j] * xt[j];
    const double th = std::tanh(u);
    const double dth = 1.0 - th * th;
    double loss_i = 0.0;
    double mu_t_dot_r = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double rj = th * a * p.mu_hat[j] - xt[j] + z[j] / bt;
      r[j] = rj;
      loss_i += rj * rj;
      mu_t_dot_r += a * p.mu_hat[j] * rj;
    }
    g.loss += loss_i;
    g.d_logit += 2.0 * dth * mu_t_dot_r;
    for (std::size_t j = 0; j < d; ++j)
      g.d_mu[j] += 2.0 * a * (th * r[j] + dth * mu_t_dot_r * xt[j]);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  g.loss *= inv_n;
  g.d_logit *= inv_n;
  for (double& v : g.d_mu) v *= inv_n;
  return g;
}

inline double ddpm_loss(const ScoreParams& p, const Minibatch& batch) {
  return ddpm_loss_and_grads(p, batch).loss;
}

inline double grad_logit(const ScoreParams& p, const Minibatch& batch) {
  return ddpm_loss_and_grads(p, batch).d_logit;
}

inline std::vector<double> grad_mu(const ScoreParams& p, const Minibatch& batch) {
  return ddpm_loss_and_grads(p, batch).d_mu;
}

}  // namespace fedgmm

#pragma once

// Score-estimation error between the true and estimated score functions,
//
//   L_est = E_{t ~ grid} E_{X_t ~ q_t} || tanh(u) mu_t - tanh(u_hat) mu_hat_t ||^2,
//
// where the -x terms of the two scores cancel. Estimated by Monte Carlo per
// grid point; plus the (m, n) scaling study that fits log-log slopes of
// L_est over full pre-training + fine-tuning runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "fedgmm/fed.hpp"
#include "fedgmm/mat.hpp"
#include "fedgmm/mixture.hpp"
#include "fedgmm/personalize.hpp"
#include "fedgmm/rng.hpp"
#include "fedgmm/score_model.hpp"

namespace fedgmm {

struct ScoreErrorEstimate {
  double value = 0.0;
  std::size_t mc_samples = 0;  // per grid point
  std::vector<double> t_grid;
  double std_error = 0.0;
};

/// 16 points log-spaced on [0.05, 3]: covers the signal-rich and the
/// noise-dominated regimes without the beta_t -> 0 singularity.
inline std::vector<double> default_t_grid() {
  const double lo = 0.05, hi = 3.0;
  const std::size_t k = 16;
  std::vector<double> grid(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double f = static_cast<double>(i) / static_cast<double>(k - 1);
    grid[i] = lo * std::pow(hi / lo, f);
  }
  return grid;
}

/// Monte-Carlo estimate of L_est between the true score of `truth` and the
/// network (est.mu_hat, est.logit_hat), averaged uniformly over the t grid.
inline ScoreErrorEstimate score_error(const MixtureParams& truth,
                                      const ScoreParams& est,
                                      std::span<const double> t_grid,
                                      std::size_t mc_samples,
                                      std::uint64_t seed) {
  if (t_grid.empty()) throw std::invalid_argument("score_error: empty t grid");
  if (mc_samples < 1000)
    throw std::invalid_argument("score_error: mc_samples must be >= 1e3");
  if (truth.dim() != est.dim())
    throw std::invalid_argument("score_error: dimension mismatch");
  const std::size_t d = truth.dim();
  const double b_true = weight_to_logit(truth.w);
  const double b_est = est.logit_hat;

  double grid_mean = 0.0;
  double grid_var = 0.0;
  std::vector<double> x(d);
  for (std::size_t gi = 0; gi < t_grid.size(); ++gi) {
    const double t = t_grid[gi];
    const double a = alpha_at(t);
    RngStream rng = keyed_stream(seed, StreamKind::score_error_mc, gi);
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t i = 0; i < mc_samples; ++i) {
      const int sign = rng.uniform() < truth.w ? 1 : -1;
      double u = b_true, u_hat = b_est;
      for (std::size_t j = 0; j < d; ++j) {
        x[j] = sign * a * truth.mu[j] + rng.normal();
        u += a * truth.mu[j] * x[j];
        u_hat += a * est.mu_hat[j] * x[j];
      }
      const double th = std::tanh(u);
      const double th_hat = std::tanh(u_hat);
      double diff_sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double delta = th * a * truth.mu[j] - th_hat * a * est.mu_hat[j];
        diff_sq += delta * delta;
      }
      sum += diff_sq;
      sum_sq += diff_sq * diff_sq;
    }
    const double mc = static_cast<double>(mc_samples);
    const double mean_t = sum / mc;
    const double var_t = std::max(0.0, sum_sq / mc - mean_t * mean_t) / mc;
    grid_mean += mean_t;
    grid_var += var_t;
  }
  const double g = static_cast<double>(t_grid.size());
  ScoreErrorEstimate out;
  out.value = grid_mean / g;
  out.mc_samples = mc_samples;
  out.t_grid.assign(t_grid.begin(), t_grid.end());
  out.std_error = std::sqrt(grid_var) / g;
  return out;
}

struct ScalingCell {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t d = 0;
  std::uint64_t seed = 0;
  double l_est = 0.0;
  double std_error = 0.0;
};

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
};

inline SlopeFit fit_loglog(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("fit_loglog: need >= 2 matched points");
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  SlopeFit f;
  f.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  f.intercept = (sy - f.slope * sx) / n;
  return f;
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median_of: empty");
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size();
  return k % 2 == 1 ? v[k / 2] : 0.5 * (v[k / 2 - 1] + v[k / 2]);
}

struct ScalingStudyConfig {
  std::vector<std::size_t> m_grid{4, 8, 16};
  std::vector<std::size_t> n_grid{100, 300, 900};
  std::vector<double> mu_true;  // shared across cells
  WeightsSpec weights = WeightsSpec::uniform(0.2, 0.8);
  double w_new = 0.85;  // outside the pre-training weights range
  std::size_t K = 4000;
  std::size_t tau_sync = 50;
  std::size_t batch = 32;
  double eta_mu = 2e-2;
  double eta_logit = 2e-2;
  double polyak_tail_frac = 0.5;
  std::size_t K_ft = 1500;
  double eta_ft = 5e-2;
  DiffusionSchedule schedule;
  std::size_t mc_samples = 4000;
  std::size_t n_seeds = 7;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct ScalingStudy {
  std::vector<ScalingCell> rows;
  // one slope per fixed m (over n), and per fixed n (over m), on medians
  std::vector<double> slope_in_n;
  std::vector<double> slope_in_m;
  double median_slope_in_n = 0.0;
  double median_slope_in_m = 0.0;
};

/// Full pre-training + new-client fine-tuning per (m, n, seed) cell; the
/// tabulated L_est is measured for the fine-tuned client against its truth.
inline ScalingStudy score_error_scaling_study(const ScalingStudyConfig& sc) {
  if (sc.m_grid.size() < 3 || sc.n_grid.size() < 3)
    throw std::invalid_argument("scaling study: need at least a 3x3 grid");
  if (sc.n_seeds < 5)
    throw std::invalid_argument("scaling study: need >= 5 seeds per cell");
  if (sc.mu_true.empty())
    throw std::invalid_argument("scaling study: mu_true must be set");
  ScalingStudy out;
  const std::vector<double> t_grid = default_t_grid();
  for (const std::size_t m : sc.m_grid) {
    for (const std::size_t n : sc.n_grid) {
      for (std::size_t si = 0; si < sc.n_seeds; ++si) {
        const std::uint64_t cell_seed =
            derive_seed(sc.seed, StreamKind::generic, m, n, si);
        FedConfig cfg;
        cfg.m = m;
        cfg.n = n;
        cfg.K = sc.K;
        cfg.tau_sync = sc.tau_sync;
        cfg.batch = std::min(sc.batch, n);
        cfg.eta_mu = sc.eta_mu;
        cfg.eta_logit = sc.eta_logit;
        cfg.schedule = sc.schedule;
        cfg.seed = cell_seed;
        cfg.weights = sc.weights;
        cfg.polyak_tail_frac = sc.polyak_tail_frac;
        cfg.threads = sc.threads;
        const RunResult run = run_pretraining(cfg, sc.mu_true);
        const std::vector<double>& backbone = run.backbone_tail_avg;

        MixtureParams new_truth{sc.mu_true, sc.w_new};
        RngStream data_rng =
            keyed_stream(cell_seed, StreamKind::client_data, 0xFFFF);
        const Matrix new_data = sample_data(new_truth, n, data_rng).x;

        FinetuneConfig ft;
        ft.K_ft = sc.K_ft;
        ft.eta_ft = sc.eta_ft;
        ft.batch = 0;
        ft.schedule = sc.schedule;
        ft.seed = cell_seed;
        const FinetuneResult fres = finetune_new_client(backbone, new_data, ft);

        // No orientation handling: the network is invariant under
        // (mu_hat, b) -> (-mu_hat, -b), so a flipped backbone with its
        // adapted logit represents the same score function.
        ScoreParams est;
        est.mu_hat = backbone;
        est.logit_hat = fres.final_logit;
        const ScoreErrorEstimate le =
            score_error(new_truth, est, t_grid, sc.mc_samples, cell_seed);
        out.rows.push_back(
            {m, n, sc.mu_true.size(), cell_seed, le.value, le.std_error});
      }
    }
  }

  auto median_l = [&](std::size_t m, std::size_t n) {
    std::vector<double> vals;
    for (const ScalingCell& c : out.rows)
      if (c.m == m && c.n == n) vals.push_back(c.l_est);
    return median_of(std::move(vals));
  };

  for (const std::size_t m : sc.m_grid) {
    std::vector<double> xs, ys;
    for (const std::size_t n : sc.n_grid) {
      xs.push_back(static_cast<double>(n));
      ys.push_back(median_l(m, n));
    }
    out.slope_in_n.push_back(fit_loglog(xs, ys).slope);
  }
  for (const std::size_t n : sc.n_grid) {
    std::vector<double> xs, ys;
    for (const std::size_t m : sc.m_grid) {
      xs.push_back(static_cast<double>(m));
      ys.push_back(median_l(m, n));
    }
    out.slope_in_m.push_back(fit_loglog(xs, ys).slope);
  }
  out.median_slope_in_n = median_of(out.slope_in_n);
  out.median_slope_in_m = median_of(out.slope_in_m);
  return out;
}

}  // namespace fedgmm

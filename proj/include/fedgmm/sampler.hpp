#pragma once

// Euler-Maruyama discretization of the reverse-time SDE
//
//   dY_s = [ Y_s + 2 * score(t(s), Y_s) ] ds + sqrt(2) dW_s,
//
// integrated from forward time t_start down to t_end over uniform steps,
// starting from N(0, I). The score is evaluated at the post-step time, so
// the last evaluation lands exactly on t_end and never below it.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fedgmm/mat.hpp"
#include "fedgmm/rng.hpp"

namespace fedgmm {

struct SamplerConfig {
  std::size_t n_steps = 500;
  double t_start = 5.0;
  double t_end = 1e-3;

  void validate() const {
    if (!(t_start > t_end && t_end > 0.0))
      throw std::invalid_argument("SamplerConfig: need t_start > t_end > 0");
    if (n_steps < 1)
      throw std::invalid_argument("SamplerConfig: n_steps must be >= 1");
  }
};

/// Generate n terminal samples by integrating the reverse SDE driven by
/// `score(t, x, out)`. Trajectories are keyed by index, so the output is
/// identical for any thread count; aborts on a non-finite state, reporting
/// the step where it happened.
template <typename ScoreInto>
Matrix reverse_sample(ScoreInto&& score, std::size_t dim,
                      const SamplerConfig& cfg, std::size_t n,
                      std::uint64_t seed, int threads = 1) {
  cfg.validate();
  if (dim < 1) throw std::invalid_argument("reverse_sample: dim must be >= 1");
  const double h = (cfg.t_start - cfg.t_end) / static_cast<double>(cfg.n_steps);
  const double noise_scale = std::sqrt(2.0 * h);
  Matrix out(n, dim);

  auto run_range = [&](std::size_t lo, std::size_t hi) {
    std::vector<double> y(dim), s(dim);
    for (std::size_t traj = lo; traj < hi; ++traj) {
      RngStream rng = keyed_stream(seed, StreamKind::trajectory, traj);
      for (double& v : y) v = rng.normal();
      for (std::size_t k = 0; k < cfg.n_steps; ++k) {
        const double t_eval = cfg.t_start - static_cast<double>(k + 1) * h;
        score(t_eval, std::span<const double>(y), std::span<double>(s));
        for (std::size_t j = 0; j < dim; ++j)
          y[j] += h * (y[j] + 2.0 * s[j]) + noise_scale * rng.normal();
        if (!all_finite(y))
          throw std::runtime_error("reverse_sample: non-finite state at step " +
                                   std::to_string(k) + " of trajectory " +
                                   std::to_string(traj));
      }
      for (std::size_t j = 0; j < dim; ++j) out(traj, j) = y[j];
    }
  };

  if (threads <= 1) {
    run_range(0, n);
  } else {
    const std::size_t nt = static_cast<std::size_t>(threads);
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < nt; ++k) {
      const std::size_t lo = n * k / nt;
      const std::size_t hi = n * (k + 1) / nt;
      if (lo < hi) pool.emplace_back(run_range, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  return out;
}

/// Fraction of rows on the +mu side of the separating hyperplane.
inline double cluster_fraction(const Matrix& samples, std::span<const double> mu) {
  if (norm2(mu) <= 0.0)
    throw std::invalid_argument("cluster_fraction: ||mu|| must be > 0");
  if (samples.rows == 0) return 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < samples.rows; ++i)
    if (dot(mu, samples.row(i)) > 0.0) ++pos;
  return static_cast<double>(pos) / static_cast<double>(samples.rows);
}

}  // namespace fedgmm

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fedgmm/estimators.hpp"
#include "fedgmm/mixture.hpp"
#include "fedgmm/score_model.hpp"
#include "test_util.hpp"

using namespace fedgmm;

namespace {

// hand-rolled generator for random (params, batch) configurations
struct RandomCase {
  ScoreParams p;
  Minibatch batch;
};

RandomCase random_case(RngStream& rng, std::size_t d, std::size_t rows) {
  RandomCase rc;
  rc.p.mu_hat.resize(d);
  for (double& v : rc.p.mu_hat) v = rng.uniform(-2.5, 2.5);
  rc.p.logit_hat = rng.uniform(-2.0, 2.0);

  DiffusionSchedule schedule;  // defaults: [1e-2, 5]
  Matrix x0(rows, d);
  for (double& v : x0.a) v = rng.uniform(-3.0, 3.0);
  rc.batch = make_minibatch(x0, schedule, rng);
  return rc;
}

}  // namespace

TEST_CASE("predict_score trivial cases", "[score_model]") {
  ScoreParams p;
  p.mu_hat = {1.0, -2.0};
  p.logit_hat = 0.0;
  const std::vector<double> zero{0.0, 0.0};
  const auto s = predict_score(p, 0.4, zero);
  CHECK(s[0] == 0.0);
  CHECK(s[1] == 0.0);
}

TEST_CASE("predict_score at the truth equals true_score", "[score_model]") {
  RngStream rng(20);
  for (int rep = 0; rep < 25; ++rep) {
    const std::size_t d = 1 + rep % 4;
    MixtureParams truth;
    truth.mu.resize(d);
    for (double& v : truth.mu) v = rng.uniform(-3.0, 3.0);
    truth.w = rng.uniform(0.05, 0.95);
    ScoreParams p;
    p.mu_hat = truth.mu;
    p.logit_hat = weight_to_logit(truth.w);
    const double t = rng.uniform(0.0, 2.0);
    std::vector<double> x(d);
    for (double& v : x) v = rng.uniform(-4.0, 4.0);
    const auto a = predict_score(p, t, x);
    const auto b = true_score(truth, t, x);
    for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(a[j] - b[j]) < 1e-12);
  }
}

TEST_CASE("predict_score matches the finite-difference-validated value",
          "[score_model][oracle]") {
  MixtureParams truth{{4.0}, 0.7};
  ScoreParams p;
  p.mu_hat = {4.0};
  p.logit_hat = weight_to_logit(0.7);
  const double t = 0.1;
  const double fd = testutil::central_diff(
      [&](double x) {
        return log_density_at_time(truth, t, std::vector<double>{x});
      },
      1.0, 1e-5);
  const auto s = predict_score(p, t, std::vector<double>{1.0});
  CHECK(testutil::rel_err(s[0], fd) < 1e-6);
}

TEST_CASE("ddpm_loss definition unrolls on a z=0 batch", "[score_model]") {
  // z = 0 and xt = x0 at t -> t_min: loss is ||s(x0)||^2 directly
  ScoreParams p;
  p.mu_hat = {4.0};
  p.logit_hat = weight_to_logit(0.7);
  Minibatch batch;
  batch.t_floor = 1e-2;
  batch.t = {1e-2};
  batch.x0 = Matrix(1, 1);
  batch.x0(0, 0) = 1.3;
  batch.xt = batch.x0;
  batch.z = Matrix(1, 1);
  const auto s = predict_score(p, 1e-2, batch.xt.row(0));
  CHECK(ddpm_loss(p, batch) == Catch::Approx(s[0] * s[0]).epsilon(1e-14));
}

TEST_CASE("ddpm_loss rejects timesteps below t_min", "[score_model]") {
  ScoreParams p;
  p.mu_hat = {1.0};
  Minibatch batch;
  batch.t_floor = 1e-2;
  batch.t = {5e-3};
  batch.x0 = Matrix(1, 1);
  batch.xt = Matrix(1, 1);
  batch.z = Matrix(1, 1);
  CHECK_THROWS_AS(ddpm_loss(p, batch), std::invalid_argument);
}

TEST_CASE("doubling z changes the loss by the quadratic expansion",
          "[score_model]") {
  RngStream rng(21);
  auto rc = random_case(rng, 3, 8);
  const double loss1 = ddpm_loss(rc.p, rc.batch);
  // closed form: ||A + 2c||^2 = ||A + c||^2 + 2 <A + c, c> + ||c||^2
  double cross = 0.0, c_sq = 0.0;
  for (std::size_t i = 0; i < rc.batch.size(); ++i) {
    const auto s = predict_score(rc.p, rc.batch.t[i], rc.batch.xt.row(i));
    const double bt = beta_at(rc.batch.t[i]);
    for (std::size_t j = 0; j < rc.batch.dim(); ++j) {
      const double c = rc.batch.z(i, j) / bt;
      cross += (s[j] + c) * c;
      c_sq += c * c;
    }
  }
  const double rows = static_cast<double>(rc.batch.size());
  Minibatch doubled = rc.batch;
  for (double& v : doubled.z.a) v *= 2.0;
  const double loss2 = ddpm_loss(rc.p, doubled);
  CHECK(loss2 == Catch::Approx(loss1 + (2.0 * cross + c_sq) / rows).epsilon(1e-12));
}

TEST_CASE("population loss is minimized at the truth", "[score_model][oracle]") {
  // common random numbers: one large fixed batch evaluated under all params
  RngStream rng(22);
  MixtureParams truth{{2.0}, 0.7};
  DiffusionSchedule schedule;
  const std::size_t n = 1000000;
  const Matrix x0 = sample_data(truth, n, rng).x;
  const Minibatch batch = make_minibatch(x0, schedule, rng);

  ScoreParams at_truth;
  at_truth.mu_hat = truth.mu;
  at_truth.logit_hat = weight_to_logit(truth.w);
  const double base = ddpm_loss(at_truth, batch);

  for (const double dmu : {-0.4, -0.1, 0.1, 0.4}) {
    ScoreParams p = at_truth;
    p.mu_hat[0] += dmu;
    CHECK(ddpm_loss(p, batch) > base);
  }
  for (const double db : {-0.5, -0.15, 0.15, 0.5}) {
    ScoreParams p = at_truth;
    p.logit_hat += db;
    CHECK(ddpm_loss(p, batch) > base);
  }
}

TEST_CASE("grad_logit vanishes exactly on an antithetic batch", "[score_model]") {
  RngStream rng(23);
  ScoreParams p;
  p.mu_hat = {1.2, -0.7};
  p.logit_hat = 0.0;
  Minibatch batch;
  batch.t_floor = 1e-2;
  batch.x0 = Matrix(2, 2);
  batch.xt = Matrix(2, 2);
  batch.z = Matrix(2, 2);
  const double t = 0.6;
  batch.t = {t, t};
  for (std::size_t j = 0; j < 2; ++j) {
    const double x = rng.uniform(-2.0, 2.0);
    const double z = rng.normal();
    batch.x0(0, j) = x;
    batch.x0(1, j) = -x;
    batch.z(0, j) = z;
    batch.z(1, j) = -z;
    const double a = alpha_at(t), bt = beta_at(t);
    batch.xt(0, j) = a * x + bt * z;
    batch.xt(1, j) = -(a * x + bt * z);
  }
  CHECK(grad_logit(p, batch) == 0.0);
}

TEST_CASE("analytic gradients match finite differences", "[score_model][oracle]") {
  RngStream rng(24);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t d = std::vector<std::size_t>{1, 2, 3, 5, 8}[rep % 5];
    const std::size_t rows = 1 + rng.uniform_below(12);
    auto rc = random_case(rng, d, rows);

    const double g_b = grad_logit(rc.p, rc.batch);
    const double fd_b = testutil::central_diff(
        [&](double b) {
          ScoreParams q = rc.p;
          q.logit_hat = b;
          return ddpm_loss(q, rc.batch);
        },
        rc.p.logit_hat, 1e-6);
    worst = std::max(worst, testutil::rel_err(g_b, fd_b));

    const auto g_mu = grad_mu(rc.p, rc.batch);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = 1e-6 * std::max(1.0, std::abs(rc.p.mu_hat[j]));
      const double fd_mu = testutil::central_diff(
          [&](double v) {
            ScoreParams q = rc.p;
            q.mu_hat[j] = v;
            return ddpm_loss(q, rc.batch);
          },
          rc.p.mu_hat[j], h);
      worst = std::max(worst, testutil::rel_err(g_mu[j], fd_mu));
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("grad_mu limit case: saturated tanh, zero residual", "[score_model]") {
  ScoreParams p;
  p.mu_hat = {2.0};
  p.logit_hat = 9.0;  // saturated
  Minibatch batch;
  batch.t_floor = 1e-2;
  const double t = 1e-2;
  batch.t = {t};
  batch.x0 = Matrix(1, 1);
  batch.x0(0, 0) = alpha_at(t) * 2.0;  // x0 placed so xt = mu_hat_t exactly
  batch.xt = Matrix(1, 1);
  batch.xt(0, 0) = alpha_at(t) * 2.0;
  batch.z = Matrix(1, 1);
  const auto g = grad_mu(p, batch);
  CHECK(std::abs(g[0]) < 1e-6);
}

TEST_CASE("grad_logit is stationary at the truth (population batch)",
          "[score_model][oracle]") {
  RngStream rng(25);
  MixtureParams truth{{1.5}, 0.65};
  ScoreParams p;
  p.mu_hat = truth.mu;
  p.logit_hat = weight_to_logit(truth.w);
  const double t = 0.4;
  const std::size_t n = 1000000;

  const Matrix x0 = sample_data(truth, n, rng).x;
  Minibatch batch;
  batch.t_floor = 1e-2;
  batch.t.assign(n, t);
  batch.x0 = x0;
  batch.z = Matrix(n, 1);
  batch.xt = Matrix(n, 1);
  const double a = alpha_at(t), bt = beta_at(t);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = rng.normal();
    batch.z(i, 0) = z;
    batch.xt(i, 0) = a * x0(i, 0) + bt * z;
  }

  // per-row gradient spread gives the Monte-Carlo standard error
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Minibatch row;
    row.t_floor = batch.t_floor;
    row.t = {t};
    row.x0 = Matrix(1, 1);
    row.x0(0, 0) = batch.x0(i, 0);
    row.z = Matrix(1, 1);
    row.z(0, 0) = batch.z(i, 0);
    row.xt = Matrix(1, 1);
    row.xt(0, 0) = batch.xt(i, 0);
    const double g = grad_logit(p, row);
    sum += g;
    sum_sq += g * g;
  }
  const double mean = sum / static_cast<double>(n);
  const double var = sum_sq / static_cast<double>(n) - mean * mean;
  const double se = std::sqrt(var / static_cast<double>(n));
  CHECK(std::abs(grad_logit(p, batch)) < 3 * se);
}

TEST_CASE("gradient descent on the mean recovers it", "[score_model][oracle]") {
  RngStream rng(26);
  MixtureParams truth{{2.0, -1.0}, 0.7};
  DiffusionSchedule schedule;
  ScoreParams p;
  p.mu_hat = {1.8, -0.9};  // start at 0.9 * mu
  p.logit_hat = weight_to_logit(truth.w);
  const std::size_t batch_n = 4096;
  for (int step = 0; step < 600; ++step) {
    const Matrix x0 = sample_data(truth, batch_n, rng).x;
    const Minibatch batch = make_minibatch(x0, schedule, rng);
    const auto g = grad_mu(p, batch);
    for (std::size_t j = 0; j < 2; ++j) p.mu_hat[j] -= 0.05 * g[j];
  }
  CHECK(p.mu_hat[0] == Catch::Approx(2.0).margin(0.05));
  CHECK(p.mu_hat[1] == Catch::Approx(-1.0).margin(0.05));
}

TEST_CASE("population logit loss is unimodal with the right minimizer",
          "[score_model][oracle]") {
  RngStream rng(27);
  MixtureParams truth{{1.2}, 0.7};
  DiffusionSchedule schedule;
  const std::size_t n = 200000;
  const Matrix x0 = sample_data(truth, n, rng).x;
  const Minibatch batch = make_minibatch(x0, schedule, rng);

  const double b_true = weight_to_logit(truth.w);
  std::vector<double> losses;
  std::vector<double> grid;
  for (int i = 0; i < 41; ++i) {
    const double b = -3.0 + 6.0 * i / 40.0;
    ScoreParams p;
    p.mu_hat = truth.mu;
    p.logit_hat = b;
    grid.push_back(b);
    losses.push_back(ddpm_loss(p, batch));
  }
  const auto min_it = std::min_element(losses.begin(), losses.end());
  const std::size_t k = static_cast<std::size_t>(min_it - losses.begin());
  CHECK(std::abs(grid[k] - b_true) <= 0.15 + 1e-12);
  // unimodal: strictly decreasing to the minimizer, then increasing
  for (std::size_t i = 0; i + 1 < k; ++i) CHECK(losses[i] > losses[i + 1]);
  for (std::size_t i = k; i + 1 < losses.size(); ++i) CHECK(losses[i] < losses[i + 1]);
}

TEST_CASE("loss respects the label-swap symmetry", "[score_model]") {
  // (mu_hat, b) -> (-mu_hat, -b) is the same score function, so the loss is
  // unchanged on any batch; mirroring the batch alone equals negating the
  // logit. Together these are the label-swap symmetry of the mixture.
  RngStream rng(28);
  auto rc = random_case(rng, 4, 16);
  const double base = ddpm_loss(rc.p, rc.batch);

  ScoreParams flipped = rc.p;
  for (double& v : flipped.mu_hat) v = -v;
  flipped.logit_hat = -flipped.logit_hat;
  CHECK(std::abs(ddpm_loss(flipped, rc.batch) - base) <
        1e-12 * std::max(1.0, base));

  Minibatch mirrored = rc.batch;
  for (double& v : mirrored.x0.a) v = -v;
  for (double& v : mirrored.z.a) v = -v;
  for (double& v : mirrored.xt.a) v = -v;
  ScoreParams neg_logit = rc.p;
  neg_logit.logit_hat = -neg_logit.logit_hat;
  CHECK(std::abs(ddpm_loss(rc.p, mirrored) - ddpm_loss(neg_logit, rc.batch)) <
        1e-12 * std::max(1.0, base));
}

TEST_CASE("sample_timesteps: range, mean, degenerate schedule", "[score_model]") {
  RngStream rng(29);
  DiffusionSchedule schedule;
  const auto ts = sample_timesteps(schedule, 100000, rng);
  double sum = 0.0;
  for (double t : ts) {
    REQUIRE(t >= schedule.t_min);
    REQUIRE(t <= schedule.t_max);
    sum += t;
  }
  const double mid = 0.5 * (schedule.t_min + schedule.t_max);
  const double se = (schedule.t_max - schedule.t_min) /
                    std::sqrt(12.0 * static_cast<double>(ts.size()));
  CHECK(std::abs(sum / static_cast<double>(ts.size()) - mid) < 5 * se);

  DiffusionSchedule tight;
  tight.t_max = 1.0;
  tight.t_min = 1.0 - 1e-9;
  const auto ts2 = sample_timesteps(tight, 100, rng);
  for (double t : ts2) CHECK(std::abs(t - 1.0) <= 1e-9);
}

TEST_CASE("stationarity of grad_logit matches moment estimator and EM",
          "[score_model][estimators][oracle]") {
  // with mu fixed at the truth, run plain GD on the logit at a fixed t and
  // compare against the moment estimator and the EM limit on the same data
  RngStream rng(30);
  MixtureParams truth{{1.8}, 0.64};
  const double t = 0.15;
  const std::size_t n = 2000;
  const auto mu_t = mean_at_time(truth, t);

  const Matrix x0 = sample_data(truth, n, rng).x;
  const auto noised = forward_noise(x0, t, rng);

  const WeightEstimate moment = moment_estimate(mu_t, noised.xt, t);
  const EmFit em = em_fit_weight(mu_t, 0.5, noised.xt);

  // SGD on the logit with fresh noise each step, tail-averaged
  ScoreParams p;
  p.mu_hat = truth.mu;
  p.logit_hat = 0.0;
  Minibatch batch;
  batch.t_floor = 1e-2;
  batch.t.assign(n, t);
  batch.x0 = x0;
  batch.z = Matrix(n, 1);
  batch.xt = Matrix(n, 1);
  const double a = alpha_at(t), bt = beta_at(t);
  const int steps = 1200, tail = 400;
  double tail_sum = 0.0;
  for (int step = 0; step < steps; ++step) {
    for (std::size_t i = 0; i < n; ++i) {
      const double z = rng.normal();
      batch.z(i, 0) = z;
      batch.xt(i, 0) = a * x0(i, 0) + bt * z;
    }
    p.logit_hat -= 0.05 * grad_logit(p, batch);
    if (step >= steps - tail) tail_sum += p.logit_hat;
  }
  const double w_gd = logit_to_weight(tail_sum / tail);

  const double stat_err = std::sqrt(exact_weight_mse(
      truth.w, static_cast<double>(n), norm2_sq(mu_t)));
  const double tol = 3.0 * (stat_err + 1.0 / std::sqrt(static_cast<double>(n)));
  CHECK(std::abs(moment.w_hat - em.w) < tol);
  CHECK(std::abs(moment.w_hat - w_gd) < tol);
  CHECK(std::abs(em.w - w_gd) < tol);
}

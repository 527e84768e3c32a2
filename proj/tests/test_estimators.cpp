#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "fedgmm/estimators.hpp"
#include "fedgmm/mixture.hpp"
#include "test_util.hpp"

using namespace fedgmm;

TEST_CASE("moment_estimate trivial cases", "[estimators]") {
  const std::vector<double> mu_t{1.5, -2.0};
  Matrix at_mu(1, 2);
  at_mu(0, 0) = 1.5;
  at_mu(0, 1) = -2.0;
  CHECK(moment_estimate(mu_t, at_mu).w_hat == 1.0);

  Matrix at_zero(1, 2);
  const auto est = moment_estimate(mu_t, at_zero);
  CHECK(est.w_hat == 0.5);
  CHECK_FALSE(est.clipped);
  CHECK(est.n_used == 1);
}

TEST_CASE("moment_estimate rejects degenerate mu_t and empty samples",
          "[estimators]") {
  Matrix x(1, 1);
  const std::vector<double> tiny{1e-7};
  CHECK_THROWS_AS(moment_estimate(tiny, x), std::invalid_argument);
  const std::vector<double> ok{1.0};
  Matrix empty(0, 1);
  CHECK_THROWS_AS(moment_estimate(ok, empty), std::invalid_argument);
}

TEST_CASE("moment_estimate clips and flags out-of-range values", "[estimators]") {
  const std::vector<double> mu_t{1.0};
  Matrix far(1, 1);
  far(0, 0) = -10.0;  // raw estimate 0.5 * (1 - 10) < 0
  const auto est = moment_estimate(mu_t, far);
  CHECK(est.w_hat == 0.0);
  CHECK(est.clipped);
}

TEST_CASE("moment estimator is consistent with the exact MSE (MC oracle)",
          "[estimators][oracle]") {
  MixtureParams p{{4.0}, 0.7};
  const auto report = evaluate_weight_mse_bound(p, 0.1, 1000, 10000, 777);
  // mean of w_hat within 3 standard errors of w
  const double se_mean = std::sqrt(report.exact_mse / 10000.0);
  CHECK(std::abs(report.mean_w_hat - 0.7) < 3 * se_mean);
  // empirical MSE within 10% of the exact value
  CHECK(report.empirical_mse == Catch::Approx(report.exact_mse).epsilon(0.10));
  CHECK(report.upper_bound >= report.exact_mse);
}

TEST_CASE("em_responsibilities trivial cases and naive-formula oracle",
          "[estimators][oracle]") {
  // w = 0.5, x = 0 -> 1/2 by symmetry
  const std::vector<double> mu_t{1.3, 0.4};
  Matrix zero(1, 2);
  CHECK(em_responsibilities(mu_t, 0.5, zero)[0] ==
        Catch::Approx(0.5).epsilon(1e-15));

  // x far along +mu_t -> 1
  Matrix far(1, 2);
  far(0, 0) = 100 * mu_t[0];
  far(0, 1) = 100 * mu_t[1];
  CHECK(em_responsibilities(mu_t, 0.5, far)[0] ==
        Catch::Approx(1.0).epsilon(1e-12));

  // random small instance vs the direct two-exponential ratio
  RngStream rng(40);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t d = 1 + rep % 3;
    std::vector<double> m(d);
    for (double& v : m) v = rng.uniform(-2.0, 2.0);
    const double w = rng.uniform(0.05, 0.95);
    Matrix x(1, d);
    for (double& v : x.a) v = rng.uniform(-3.0, 3.0);
    const double r = em_responsibilities(m, w, x)[0];
    double q1 = 0.0, q2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      q1 += (x(0, j) - m[j]) * (x(0, j) - m[j]);
      q2 += (x(0, j) + m[j]) * (x(0, j) + m[j]);
    }
    const double num = w * std::exp(-0.5 * q1);
    const double den = num + (1.0 - w) * std::exp(-0.5 * q2);
    CHECK(r == Catch::Approx(num / den).epsilon(1e-12));
  }
}

TEST_CASE("em_weight_step trivial cases", "[estimators]") {
  const std::vector<double> mu_t{2.0};
  Matrix sym(2, 1);
  sym(0, 0) = 2.0;
  sym(1, 0) = -2.0;
  CHECK(em_weight_step(mu_t, 0.5, sym) == Catch::Approx(0.5).epsilon(1e-15));

  Matrix far(3, 1);
  for (std::size_t i = 0; i < 3; ++i) far(i, 0) = 50.0;
  CHECK(em_weight_step(mu_t, 0.5, far) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("EM limit matches the grid-search MLE (oracle)",
          "[estimators][oracle]") {
  RngStream rng(41);
  MixtureParams p{{4.0}, 0.7};
  const double t = 0.1;  // ||mu_t|| ~ 3.62
  const std::size_t n = 1000;
  const auto mu_t = mean_at_time(p, t);
  const auto data = sample_at_time(p, t, n, rng);

  const EmFit fit = em_fit_weight(mu_t, 0.5, data.x, 1e-10, 1000);
  REQUIRE(fit.converged);

  // two-stage grid search over the (concave in w) likelihood
  auto loglik = [&](double w) { return mixture_loglik(mu_t, w, data.x); };
  double best_w = 0.5, best_l = loglik(0.5);
  for (int i = 1; i < 2000; ++i) {
    const double w = i / 2000.0;
    const double l = loglik(w);
    if (l > best_l) {
      best_l = l;
      best_w = w;
    }
  }
  const double coarse = best_w;
  for (int i = -1000; i <= 1000; ++i) {
    const double w = coarse + i * 1e-6;
    if (w <= 0.0 || w >= 1.0) continue;
    const double l = loglik(w);
    if (l > best_l) {
      best_l = l;
      best_w = w;
    }
  }
  CHECK(std::abs(fit.w - best_w) < 1e-4);
}

TEST_CASE("EM iteration never decreases the log-likelihood", "[estimators]") {
  RngStream rng(42);
  MixtureParams p{{1.0}, 0.65};
  const double t = 0.2;
  const auto mu_t = mean_at_time(p, t);
  const auto data = sample_at_time(p, t, 500, rng);
  double w = 0.1;
  double prev = mixture_loglik(mu_t, w, data.x);
  for (int it = 0; it < 60; ++it) {
    w = em_weight_step(mu_t, w, data.x);
    const double cur = mixture_loglik(mu_t, w, data.x);
    CHECK(cur >= prev - 1e-12);
    prev = cur;
  }
}

TEST_CASE("bound evaluator: vanishing separation term", "[estimators][oracle]") {
  // ||mu_t|| = 1000 kills the separation term; MSE ~ w(1-w)/n = 0.25/n
  MixtureParams p{{1000.0}, 0.5};
  const auto report = evaluate_weight_mse_bound(p, 0.0, 100, 10000, 4242);
  CHECK(report.empirical_mse == Catch::Approx(0.25 / 100.0).epsilon(0.10));
}

TEST_CASE("bound evaluator: 1/n scaling across decades", "[estimators][oracle]") {
  MixtureParams p{{4.0}, 0.7};
  const auto r100 = evaluate_weight_mse_bound(p, 0.1, 100, 10000, 31);
  const auto r1000 = evaluate_weight_mse_bound(p, 0.1, 1000, 10000, 32);
  CHECK(r100.empirical_mse <= r100.upper_bound);
  CHECK(r1000.empirical_mse <= r1000.upper_bound);
  const double ratio = r100.empirical_mse / r1000.empirical_mse;
  CHECK(ratio == Catch::Approx(10.0).epsilon(0.20));
}

TEST_CASE("bound evaluator: weight MSE is dimension-free",
          "[estimators][oracle]") {
  // rescale mu so ||mu_t|| stays fixed across d
  const double target_norm = 3.0;
  std::vector<double> mses;
  for (const std::size_t d : {std::size_t{1}, std::size_t{8}, std::size_t{64}}) {
    std::vector<double> mu(d, target_norm / std::sqrt(static_cast<double>(d)));
    MixtureParams p{mu, 0.7};
    const auto report = evaluate_weight_mse_bound(p, 0.0, 200, 4000, 55);
    mses.push_back(report.empirical_mse);
  }
  const double lo = *std::min_element(mses.begin(), mses.end());
  const double hi = *std::max_element(mses.begin(), mses.end());
  CHECK((hi - lo) / lo < 0.25);
}

TEST_CASE("bound evaluator is thread-invariant bitwise", "[estimators]") {
  MixtureParams p{{2.0, 1.0}, 0.6};
  const auto seq = evaluate_weight_mse_bound(p, 0.1, 50, 400, 99, 1);
  const auto par = evaluate_weight_mse_bound(p, 0.1, 50, 400, 99, 4);
  CHECK(seq.empirical_mse == par.empirical_mse);
  CHECK(seq.mean_w_hat == par.mean_w_hat);
  CHECK(seq.clipped_count == par.clipped_count);
}

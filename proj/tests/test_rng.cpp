#include <catch2/catch_amalgamated.hpp>

#include "fedgmm/rng.hpp"
#include "test_util.hpp"

using namespace fedgmm;

TEST_CASE("keyed streams are deterministic and distinct", "[rng]") {
  RngStream a = keyed_stream(42, StreamKind::local_step, 3, 17);
  RngStream b = keyed_stream(42, StreamKind::local_step, 3, 17);
  RngStream c = keyed_stream(42, StreamKind::local_step, 3, 18);
  bool all_equal = true, any_equal_c = false;
  for (int i = 0; i < 64; ++i) {
    const std::uint64_t va = a.next_u64();
    const std::uint64_t vb = b.next_u64();
    const std::uint64_t vc = c.next_u64();
    all_equal = all_equal && (va == vb);
    any_equal_c = any_equal_c || (va == vc);
  }
  CHECK(all_equal);
  CHECK_FALSE(any_equal_c);
}

TEST_CASE("copying a stream copies the cached normal", "[rng]") {
  RngStream a(7);
  (void)a.normal();       // leaves a spare cached
  RngStream b = a;        // copy mid-pair
  CHECK(a.normal() == b.normal());
  CHECK(a.normal() == b.normal());
}

TEST_CASE("uniform stays in [0,1) and has the right moments", "[rng]") {
  RngStream rng(123);
  const std::size_t n = 200000;
  double sum = 0.0, min_v = 1.0, max_v = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    sum += u;
    min_v = std::min(min_v, u);
    max_v = std::max(max_v, u);
  }
  CHECK(min_v >= 0.0);
  CHECK(max_v < 1.0);
  // SE of the mean is ~ sqrt(1/12/n) = 6.5e-4
  CHECK(std::abs(sum / n - 0.5) < 5 * 6.5e-4);
}

TEST_CASE("normal draws match N(0,1) moments and tails", "[rng]") {
  RngStream rng(99);
  const std::size_t n = 200000;
  std::vector<double> xs(n);
  for (double& v : xs) v = rng.normal();
  const auto m = testutil::moments(xs);
  CHECK(std::abs(m.mean) < 5.0 / std::sqrt(static_cast<double>(n)));
  CHECK(std::abs(m.var - 1.0) < 0.02);
  const double d = testutil::ks_statistic(xs, [](double x) {
    return testutil::normal_cdf(x);
  });
  CHECK(d < testutil::ks_critical(1e-3) / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("uniform_below is in range and roughly uniform", "[rng]") {
  RngStream rng(5);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const std::uint64_t v = rng.uniform_below(7);
    REQUIRE(v < 7);
    ++counts[v];
  }
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

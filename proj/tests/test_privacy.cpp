#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "dpseq/privacy.hpp"
#include "test_util.hpp"

using namespace dpseq;
using namespace dpseq::testutil;

namespace {

PrivacyLedger make_ledger(double sigma, double q, long long steps,
                          double delta) {
  PrivacyLedger l;
  l.sigma_dp = sigma;
  l.q = q;
  l.steps_taken = steps;
  l.delta = delta;
  return l;
}

}  // namespace

TEST_CASE("dp_step: noiseless averaging and linear scaling in B") {
  TensorSet g;
  g.names = {"w"};
  g.tensors = {Array({2, 2}, {4.0, -2.0, 8.0, 0.0})};
  Rng rng(1);
  auto out = dp_step(g, 1.0, 0.0, 4.0, rng);
  CHECK(out.tensors[0].data[0] == doctest::Approx(1.0));
  CHECK(out.tensors[0].data[1] == doctest::Approx(-0.5));

  Rng r1 = Rng(9).stream(kNoiseStream);
  Rng r2 = Rng(9).stream(kNoiseStream);
  auto a = dp_step(g, 1.0, 1.0, 2.0, r1);
  auto b = dp_step(g, 1.0, 1.0, 4.0, r2);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.tensors[0].data[i] == doctest::Approx(2.0 * b.tensors[0].data[i]));
  }
  CHECK_THROWS(dp_step(g, 1.0, -0.1, 4.0, rng));
}

TEST_CASE("dp_step noise has the calibrated per-coordinate variance") {
  TensorSet g;
  g.names = {"w"};
  g.tensors = {Array::zeros({8})};
  Rng rng = Rng(77).stream(kNoiseStream);
  const std::size_t steps = 50000;  // 400k draws total
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    auto out = dp_step(g, 1.0, 1.0, 1.0, rng);
    for (double v : out.tensors[0].data) {
      sum += v;
      sum_sq += v * v;
    }
  }
  const double n = 8.0 * static_cast<double>(steps);
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("gaussian RDP at q=1 reproduces the closed-form epsilon") {
  // min over alpha of [alpha/2 + ln(1e5)/(alpha-1)]; continuously optimal
  // value is 0.5 + sqrt(2 ln 1e5) ~= 5.2985, attained near alpha = 5.80.
  auto ledger = make_ledger(1.0, 1.0, 1, 1e-5);
  const double continuous = 0.5 + std::sqrt(2.0 * std::log(1e5));
  double best_alpha = 0.0;
  const double eps = rdp_epsilon(ledger, &best_alpha);
  CHECK(eps >= continuous - 1e-12);  // grid minimum cannot beat continuous
  CHECK(std::abs(eps - continuous) < 0.01);
  CHECK(best_alpha == doctest::Approx(6.0));
}

TEST_CASE("epsilon is monotone in steps, sigma, q, delta") {
  const double e1 = rdp_epsilon(make_ledger(1.0, 0.02, 500, 1e-5));
  const double e2 = rdp_epsilon(make_ledger(1.0, 0.02, 1000, 1e-5));
  CHECK(e2 > e1);
  const double e3 = rdp_epsilon(make_ledger(1.5, 0.02, 500, 1e-5));
  CHECK(e3 < e1);
  const double e4 = rdp_epsilon(make_ledger(1.0, 0.05, 500, 1e-5));
  CHECK(e4 > e1);
  const double e5 = rdp_epsilon(make_ledger(1.0, 0.02, 500, 1e-3));
  CHECK(e5 < e1);
}

TEST_CASE("RDP composition is additive at every order") {
  for (double alpha : default_rdp_orders()) {
    const double r = rdp_subsampled_gaussian(0.03, 1.2, alpha);
    const double total = 700.0 * r;
    CHECK(std::abs((300.0 + 400.0) * r - total) <= 1e-12 * (1.0 + total));
    CHECK(std::abs(300.0 * r + 400.0 * r - total) <= 1e-9 * (1.0 + total));
  }
}

TEST_CASE("subsampled RDP agrees with the quadrature oracle") {
  // One configuration here (the acceptance suite covers the full check):
  // sigma=1, q=0.01, alpha over a few representative orders.
  for (double alpha : {2.0, 4.0, 8.0, 16.0, 1.5}) {
    const double series = rdp_subsampled_gaussian(0.01, 1.0, alpha);
    const double quad =
        std::max(0.0, log_a_quadrature(0.01, 1.0, alpha) / (alpha - 1.0));
    CHECK(rel_diff(series, quad) < 0.01);
  }
}

TEST_CASE("fractional series is continuous with the integer route") {
  // 2.999999 takes the fractional series, 3.0 the exact binomial form.
  const double rf = rdp_subsampled_gaussian(0.02, 1.1, 2.999999);
  const double ri = rdp_subsampled_gaussian(0.02, 1.1, 3.0);
  CHECK(rel_diff(rf, ri) < 1e-4);
}

TEST_CASE("rdp input validation") {
  CHECK_THROWS(rdp_subsampled_gaussian(1.2, 1.0, 2.0));
  CHECK_THROWS(rdp_subsampled_gaussian(0.5, 0.0, 2.0));
  CHECK_THROWS(rdp_subsampled_gaussian(0.5, 1.0, 1.0));
}

TEST_CASE("calibrate_sigma round-trips within slack") {
  const double target = 5.0;
  const double sigma = calibrate_sigma(target, 1e-5, 0.01, 1000);
  const double eps = rdp_epsilon(make_ledger(sigma, 0.01, 1000, 1e-5));
  CHECK(eps <= target);
  CHECK(eps >= 0.999 * target);

  const double sigma10 = calibrate_sigma(10.0, 1e-5, 0.01, 1000);
  CHECK(sigma10 < sigma);  // a looser budget needs less noise
}

TEST_CASE("calibrate_sigma inverts the q=1 closed form") {
  // Grid epsilon at sigma=1, q=1, T=1 is ~5.3026; calibrating to it lands on
  // sigma ~= 1.
  const double target = rdp_epsilon(make_ledger(1.0, 1.0, 1, 1e-5));
  const double sigma = calibrate_sigma(target, 1e-5, 1.0, 1);
  CHECK(std::abs(sigma - 1.0) < 0.005);
}

TEST_CASE("calibrate_sigma errors when the bracket cannot reach the target") {
  CHECK_THROWS(calibrate_sigma(1e-6, 1e-5, 1.0, 1));     // too tight for sigma=50
  CHECK_THROWS(calibrate_sigma(1e9, 1e-5, 1.0, 1));      // sigma=0.3 overshoots
}

TEST_CASE("noise stream is disjoint from the other streams") {
  Rng noise = Rng(123).stream(kNoiseStream);
  Rng data = Rng(123).stream(kDataStream);
  Rng dropout = Rng(123).stream(kDropoutStream);
  bool eq_data = true, eq_drop = true;
  for (int i = 0; i < 8; ++i) {
    const std::uint64_t n = noise.next_u64();
    if (n != data.next_u64()) eq_data = false;
    if (n != dropout.next_u64()) eq_drop = false;
  }
  CHECK_FALSE(eq_data);
  CHECK_FALSE(eq_drop);
}

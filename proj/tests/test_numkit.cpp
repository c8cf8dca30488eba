#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <limits>

#include "doctest.h"
#include "dpseq/numkit.hpp"
#include "test_util.hpp"

using namespace dpseq;

TEST_CASE("stable_softmax basics") {
  {
    std::vector<double> x = {0.0, 0.0};
    auto p = stable_softmax(x);
    CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-14));
  }
  {
    std::vector<double> x = {1000.0, 1000.0, 1000.0};
    auto p = stable_softmax(x);
    for (double v : p) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-13));
  }
  {
    std::vector<double> x = {0.0, std::log(3.0)};
    auto p = stable_softmax(x);
    CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-13));
    CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-13));
  }
}

TEST_CASE("stable_softmax sums to one and is shift invariant") {
  Rng rng(17);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 1 + rng.next_index(8);
    std::vector<double> x(n), shifted(n);
    const double c = 100.0 * (rng.next_double() - 0.5);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = 20.0 * (rng.next_double() - 0.5);
      shifted[i] = x[i] + c;
    }
    auto p = stable_softmax(x);
    auto ps = stable_softmax(shifted);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sum += p[i];
      CHECK(std::abs(p[i] - ps[i]) <= 1e-12);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("stable_softmax rejects non-finite input") {
  std::vector<double> x = {0.0, std::numeric_limits<double>::infinity()};
  CHECK_THROWS(stable_softmax(x));
  CHECK_THROWS(stable_softmax(std::vector<double>{}));
}

TEST_CASE("gumbel_max_expectation matches closed forms") {
  Rng rng(23);
  {
    std::vector<double> x = {0.0};
    auto est = gumbel_max_expectation(x, 1000000, rng);
    CHECK(std::abs(est.value - kEulerMascheroni) <= 3.0 * est.std_error);
  }
  {
    // max of two i.i.d. standard Gumbels is Gumbel(ln 2).
    std::vector<double> x = {0.0, 0.0};
    auto est = gumbel_max_expectation(x, 1000000, rng);
    CHECK(std::abs(est.value - (std::log(2.0) + kEulerMascheroni)) <=
          3.0 * est.std_error);
  }
}

TEST_CASE("gumbel estimate is translation equivariant") {
  std::vector<double> x0 = {0.0};
  std::vector<double> xa = {7.25};
  Rng r1(5), r2(5);
  auto e0 = gumbel_max_expectation(x0, 20000, r1);
  auto ea = gumbel_max_expectation(xa, 20000, r2);
  CHECK(std::abs((ea.value - 7.25) - e0.value) <= 1e-12);
}

TEST_CASE("gumbel identity: E[max] = logsumexp + Euler-Mascheroni") {
  Rng rng(29);
  for (int rep = 0; rep < 3; ++rep) {
    const std::size_t n = 1 + rng.next_index(5);
    std::vector<double> x(n);
    for (auto& v : x) v = 4.0 * (rng.next_double() - 0.5);
    auto est = gumbel_max_expectation(x, 1000000, rng);
    const double target = logsumexp(x) + kEulerMascheroni;
    CHECK(std::abs(est.value - target) <= 4.0 * est.std_error);
  }
}

TEST_CASE("gaussian_sample") {
  Rng rng(31);
  auto zero = gaussian_sample(0.0, 0.0, {4, 4}, rng);
  for (double v : zero.data) CHECK(v == 0.0);
  auto fives = gaussian_sample(5.0, 0.0, {3}, rng);
  for (double v : fives.data) CHECK(v == 5.0);
  auto big = gaussian_sample(0.0, 1.0, {1000000}, rng);
  const double var = mean_square(big.data);
  CHECK(std::abs(var - 1.0) < 0.01);
  CHECK_THROWS(gaussian_sample(0.0, -1e-9, {2}, rng));
}

TEST_CASE("matrix kernels agree with loop oracle and trace identity") {
  Rng rng(37);
  for (int rep = 0; rep < 10; ++rep) {
    Array a = Array::zeros({5, 5}), b = Array::zeros({5, 5});
    for (auto& v : a.data) v = rng.next_double() - 0.5;
    for (auto& v : b.data) v = rng.next_double() - 0.5;
    Array c = matmul(a, b);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 5; ++k) s += a.at(i, k) * b.at(k, j);
        CHECK(std::abs(c.at(i, j) - s) <= 1e-12);
      }
    }
    // <A, B> == trace(A^T B)
    CHECK(std::abs(inner(a, b) - trace(matmul(transpose(a), b))) <= 1e-12);
    Array t = transpose(a);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 5; ++j) CHECK(t.at(j, i) == a.at(i, j));
    }
  }
}

TEST_CASE("rng determinism and stream independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng s1 = Rng(42).stream(kNoiseStream);
  Rng s2 = Rng(42).stream(kDropoutStream);
  bool all_equal = true;
  for (int i = 0; i < 16; ++i) {
    if (s1.next_u64() != s2.next_u64()) all_equal = false;
  }
  CHECK_FALSE(all_equal);
  // Gaussian stream is deterministic too.
  Rng g1 = Rng(7).stream(kNoiseStream), g2 = Rng(7).stream(kNoiseStream);
  for (int i = 0; i < 64; ++i) CHECK(g1.next_gaussian() == g2.next_gaussian());
}

TEST_CASE("array invariants") {
  CHECK_THROWS(Array({2, 3}, std::vector<double>(5, 0.0)));
  Array ok({2, 3}, std::vector<double>(6, 1.0));
  CHECK(ok.size() == 6);
  Array bad = Array::zeros({2});
  bad.data[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS(require_finite(bad, "test"));
}

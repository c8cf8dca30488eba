#include "dpseq/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dpseq {

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

// splitmix64 output function.
std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}

}  // namespace

Array::Array(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_product(shape) != data.size()) {
    throw std::invalid_argument("Array: shape does not match data length");
  }
}

Array Array::zeros(std::vector<std::size_t> shape) {
  Array a;
  a.data.assign(shape_product(shape), 0.0);
  a.shape = std::move(shape);
  return a;
}

Array Array::full(std::vector<std::size_t> shape, double value) {
  Array a = zeros(std::move(shape));
  a.fill(value);
  return a;
}

std::size_t Array::rows() const {
  if (shape.size() != 2) throw std::invalid_argument("Array::rows: not 2-D");
  return shape[0];
}

std::size_t Array::cols() const {
  if (shape.size() != 2) throw std::invalid_argument("Array::cols: not 2-D");
  return shape[1];
}

void Array::fill(double v) { std::fill(data.begin(), data.end(), v); }

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

void require_finite(std::span<const double> v, const std::string& what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::domain_error("non-finite value in " + what);
    }
  }
}

void require_finite(const Array& a, const std::string& what) {
  require_finite(std::span<const double>(a.data), what);
}

Rng::Rng(std::uint64_t seed) : key_(mix64(seed ^ 0x5dee3d3bULL)), counter_(0) {}

Rng Rng::stream(std::uint64_t id) const {
  Rng r;
  r.key_ = mix64(key_ ^ mix64(id * kGolden + 0x1234577ULL));
  return r;
}

Rng Rng::stream(std::uint64_t a, std::uint64_t b) const {
  return stream(a).stream(b);
}

Rng Rng::stream(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
  return stream(a).stream(b).stream(c);
}

std::uint64_t Rng::next_u64() { return mix64(key_ + (++counter_) * kGolden); }

double Rng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_open() {
  return (static_cast<double>(next_u64() >> 12) + 0.5) * 0x1.0p-52;
}

double Rng::next_gaussian() {
  if (has_gauss_cache_) {
    has_gauss_cache_ = false;
    return gauss_cache_;
  }
  double u, v, s;
  do {
    u = 2.0 * next_double() - 1.0;
    v = 2.0 * next_double() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  gauss_cache_ = v * f;
  has_gauss_cache_ = true;
  return u * f;
}

double Rng::next_gumbel() { return -std::log(-std::log(next_open())); }

std::size_t Rng::next_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::next_index: n == 0");
  const std::uint64_t bound = std::numeric_limits<std::uint64_t>::max() / n * n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= bound);
  return static_cast<std::size_t>(v % n);
}

std::vector<double> stable_softmax(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("stable_softmax: empty input");
  require_finite(x, "stable_softmax input");
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - m);
    z += out[i];
  }
  for (double& o : out) o /= z;
  return out;
}

double logsumexp(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("logsumexp: empty input");
  const double m = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(m)) return m;  // all -inf
  double z = 0.0;
  for (double v : x) z += std::exp(v - m);
  return m + std::log(z);
}

MonteCarloEstimate gumbel_max_expectation(std::span<const double> x,
                                          std::size_t n_samples, Rng& rng) {
  if (x.empty()) throw std::invalid_argument("gumbel_max_expectation: empty x");
  if (n_samples < 1) {
    throw std::invalid_argument("gumbel_max_expectation: n_samples < 1");
  }
  require_finite(x, "gumbel_max_expectation input");
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    double best = -std::numeric_limits<double>::infinity();
    for (double xi : x) best = std::max(best, xi + rng.next_gumbel());
    sum += best;
    sum_sq += best * best;
  }
  const double n = static_cast<double>(n_samples);
  MonteCarloEstimate est;
  est.value = sum / n;
  const double var = std::max(0.0, sum_sq / n - est.value * est.value);
  est.std_error = std::sqrt(var / n);
  return est;
}

Array gaussian_sample(double mean, double variance,
                      std::vector<std::size_t> shape, Rng& rng) {
  if (variance < 0.0) {
    throw std::invalid_argument("gaussian_sample: negative variance");
  }
  Array a = Array::zeros(std::move(shape));
  const double sd = std::sqrt(variance);
  for (double& v : a.data) v = mean + sd * rng.next_gaussian();
  require_finite(a, "gaussian_sample output");
  return a;
}

Array matmul(const Array& a, const Array& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: incompatible shapes");
  }
  Array c = Array::zeros({a.rows(), b.cols()});
  matmul_nn(c.data.data(), a.data.data(), b.data.data(), a.rows(), a.cols(),
            b.cols(), false);
  require_finite(c, "matmul output");
  return c;
}

Array transpose(const Array& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: not 2-D");
  Array t = Array::zeros({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      t.at(j, i) = a.at(i, j);
    }
  }
  return t;
}

double inner(const Array& a, const Array& b) {
  if (a.shape != b.shape) throw std::invalid_argument("inner: shape mismatch");
  return dot(a.data.data(), b.data.data(), a.size());
}

double trace(const Array& a) {
  if (a.rank() != 2 || a.rows() != a.cols()) {
    throw std::invalid_argument("trace: not square");
  }
  double t = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) t += a.at(i, i);
  return t;
}

void matmul_nn(double* c, const double* a, const double* b, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void matmul_nt(double* c, const double* a, const double* b, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = dot(ai, b + j * k, k);
      ci[j] = accumulate ? ci[j] + v : v;
    }
  }
}

void matmul_tn(double* c, const double* a, const double* b, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double sum_squares(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

double mean_square(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return sum_squares(v) / static_cast<double>(v.size());
}

void TensorSet::add_scaled(const TensorSet& other, double scale) {
  if (other.tensors.size() != tensors.size()) {
    throw std::invalid_argument("TensorSet::add_scaled: size mismatch");
  }
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    auto& dst = tensors[t].data;
    const auto& src = other.tensors[t].data;
    if (dst.size() != src.size()) {
      throw std::invalid_argument("TensorSet::add_scaled: shape mismatch");
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
  }
}

void TensorSet::scale(double s) {
  for (auto& t : tensors) {
    for (double& v : t.data) v *= s;
  }
}

double TensorSet::squared_norm() const {
  double s = 0.0;
  for (const auto& t : tensors) s += sum_squares(t.data);
  return s;
}

}  // namespace dpseq

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dpseq {

// Dense row-major array of doubles. Shape is a list of extents; data holds
// product(shape) values. Kept as a plain struct so callers can build views
// and test fixtures directly; invariants are checked by the factory helpers
// and require_finite().
struct Array {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Array() = default;
  Array(std::vector<std::size_t> s, std::vector<double> d);

  static Array zeros(std::vector<std::size_t> shape);
  static Array full(std::vector<std::size_t> shape, double value);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool empty() const { return data.empty(); }

  std::size_t rows() const;  // 2-D only
  std::size_t cols() const;  // 2-D only

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
  double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  double* row(std::size_t i) { return data.data() + i * cols(); }
  const double* row(std::size_t i) const { return data.data() + i * cols(); }

  void fill(double v);
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// Throws std::domain_error naming `what` if any element is NaN/Inf.
void require_finite(const Array& a, const std::string& what);
void require_finite(std::span<const double> v, const std::string& what);

// Counter-based deterministic RNG. A stream is (key, counter); draws are
// splitmix64-style hashes of the counter, so identical seeds give identical
// sequences on any platform with the same libm (log/sqrt are used by the
// Gaussian path). Streams derived via stream(id) are statistically
// independent; derive them before drawing from the parent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  Rng stream(std::uint64_t id) const;
  Rng stream(std::uint64_t a, std::uint64_t b) const;
  Rng stream(std::uint64_t a, std::uint64_t b, std::uint64_t c) const;

  std::uint64_t next_u64();
  double next_double();    // uniform [0, 1)
  double next_open();      // uniform (0, 1)
  double next_gaussian();  // standard normal, Marsaglia polar
  double next_gumbel();    // standard Gumbel, -log(-log U)
  std::size_t next_index(std::size_t n);  // uniform in [0, n)

 private:
  Rng() = default;
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double gauss_cache_ = 0.0;
  bool has_gauss_cache_ = false;
};

// Named stream ids used across the toolkit; keeping them in one place makes
// the stream-disjointness guarantee auditable.
enum StreamId : std::uint64_t {
  kDataStream = 1,
  kNoiseStream = 2,
  kInitStream = 3,
  kDropoutStream = 4,
  kSynthStream = 5,
};

// --- numerically stable primitives ---

// Softmax with max-subtraction. Input must be non-empty and finite.
std::vector<double> stable_softmax(std::span<const double> x);

double logsumexp(std::span<const double> x);

struct MonteCarloEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Monte-Carlo estimate of E[max_j (x_j + g_j)] with g_j i.i.d. standard
// Gumbel. Equals logsumexp(x) + Euler-Mascheroni in expectation.
MonteCarloEstimate gumbel_max_expectation(std::span<const double> x,
                                          std::size_t n_samples, Rng& rng);

inline constexpr double kEulerMascheroni = 0.5772156649015329;

// i.i.d. draws from N(mean, variance); variance must be >= 0.
Array gaussian_sample(double mean, double variance,
                      std::vector<std::size_t> shape, Rng& rng);

// --- dense kernels (2-D) ---

Array matmul(const Array& a, const Array& b);     // a(m,k) * b(k,n)
Array transpose(const Array& a);
double inner(const Array& a, const Array& b);     // sum of elementwise products
double trace(const Array& a);                     // square 2-D

// Raw kernels used by the hot paths; C is m x n row-major.
// accumulate=false overwrites C, true adds into it.
void matmul_nn(double* c, const double* a, const double* b, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate);
// c = a(m,k) * b(n,k)^T
void matmul_nt(double* c, const double* a, const double* b, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate);
// c = a(k,m)^T * b(k,n)
void matmul_tn(double* c, const double* a, const double* b, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate);

double dot(const double* a, const double* b, std::size_t n);
double sum_squares(std::span<const double> v);
double mean_square(std::span<const double> v);

// Named collection of tensors, parallel to a model's parameter list; the
// container for gradients, optimizer moments and DP noise.
struct TensorSet {
  std::vector<std::string> names;
  std::vector<Array> tensors;

  std::size_t size() const { return tensors.size(); }
  void add_scaled(const TensorSet& other, double scale);
  void scale(double s);
  double squared_norm() const;
};

}  // namespace dpseq

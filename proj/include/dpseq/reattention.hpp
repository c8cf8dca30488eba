#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dpseq/numkit.hpp"
#include "dpseq/seqdata.hpp"

namespace dpseq {

struct ModelParams;
struct SequenceBatch;

// Per-parameter uncertainty scale induced by the DP noise: sigma_dp / B for
// weights inside the encoder, sigma_dp / (B * p_i) for token embeddings.
struct EffectiveError {
  std::vector<double> token_sigma;  // length M, indexed by token id - 1
  double weight_sigma = 0.0;
  double sigma_dp = 0.0;
  double batch_size = 0.0;
};

EffectiveError effective_errors(double sigma_dp, double batch_size,
                                const FrequencyTable& frequencies);

// (mean, variance) pair per tensor under the isotropic-noise contract: the
// mean is a full array, the variance a single scalar shared by all entries.
struct GaussianMoments {
  Array mean;
  double variance = 0.0;
};

// Variance of a product of independent scalars applied with per-tensor
// mean-square statistics; mean is the matrix product of the means.
GaussianMoments propagate_linear(const GaussianMoments& x,
                                 const GaussianMoments& w);

// Moments of max(X1, X2) for independent Gaussians. phi/Phi closed form.
void gaussian_max_moments(double mu1, double var1, double mu2, double var2,
                          double& mean_out, double& var_out);

// Coordinate-wise max(X, 0) moments; output variance is the average of the
// per-coordinate variances (scalar contract).
GaussianMoments propagate_relu(const GaussianMoments& x);
// Shares the ReLU closed form; forward behavior of the two activations is
// close enough that the same variance propagation is used.
GaussianMoments propagate_gelu(const GaussianMoments& x);

// Independent sum: means add, variances add.
GaussianMoments propagate_residual(const GaussianMoments& a,
                                   const GaussianMoments& b);

// Per-block, per-position key variances for a batch, obtained by seeding
// each position with its token's squared effective error and propagating
// through the encoder's mean path up to every block's key projection.
struct ReattentionContext {
  std::vector<Array> sigma_sq;  // n_blocks entries, each B x L
  bool renormalize = true;
  double exponent_clamp = 30.0;
  // Running count of clamped correction exponents (overflow guard hits).
  mutable std::uint64_t clamped = 0;
};

ReattentionContext key_variances(const ModelParams& params,
                                 const EffectiveError& errors,
                                 const SequenceBatch& batch);

// Divides every unmasked score by exp(<q,q> * sigma_sq / 2) and renormalizes
// the row. `scores` must be a probability row over the unmasked keys; masked
// keys carry 0 and stay 0. Exponents above `clamp` are clamped; the return
// value counts clamped entries. A row whose exponents are all zero is left
// bit-identical.
std::size_t reattend(std::span<double> scores, std::span<const double> query,
                     std::span<const double> sigma_sq, bool renormalize = true,
                     double clamp = 30.0);

// Empirical E[S_i] when keys are drawn K_i ~ N(key_mean_i, sigma_sq_i * I):
// the sampling oracle for the multiplicative-inflation prediction.
std::vector<double> distraction_monte_carlo(std::span<const double> query,
                                            const Array& key_means,
                                            std::span<const double> sigma_sq,
                                            std::size_t n_samples, Rng& rng);

}  // namespace dpseq

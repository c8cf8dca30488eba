#pragma once

#include <cstdint>
#include <vector>

#include "dpseq/numkit.hpp"

namespace dpseq {

std::vector<double> default_rdp_orders();

struct PrivacyLedger {
  double sigma_dp = 0.0;
  double q = 1.0;  // sampling rate
  long long steps_taken = 0;
  double delta = 1e-5;
  std::vector<double> rdp_orders = default_rdp_orders();
  // Set when uniform sampling was used for benchmarking; the Poisson
  // amplification assumption then does not strictly hold.
  bool uniform_sampling_caveat = false;
};

// One-step Renyi divergence of the subsampled Gaussian mechanism at order
// alpha: the exact alpha/(2 sigma^2) when q == 1, otherwise the stable
// binomial-series evaluation (integer orders exactly, fractional orders via
// the two-sided series).
double rdp_subsampled_gaussian(double q, double sigma, double alpha);

// epsilon at the ledger's delta and steps_taken:
//   min over alpha of [steps * rdp(alpha) + log(1/delta) / (alpha - 1)].
double rdp_epsilon(const PrivacyLedger& ledger);
double rdp_epsilon(const PrivacyLedger& ledger, double* best_alpha);

// Binary search over sigma in [0.3, 50] for the smallest noise multiplier
// whose epsilon lands in [0.999 * target, target].
double calibrate_sigma(double epsilon_target, double delta, double q,
                       long long steps,
                       const std::vector<double>& orders = default_rdp_orders());

// G = (summed_clipped_grad + sigma_dp * C * N(0, I)) / B_nominal with fresh
// noise per coordinate, drawn from the dedicated DP-noise stream.
TensorSet dp_step(const TensorSet& summed_clipped_grad, double C,
                  double sigma_dp, double B_nominal, Rng& rng);

}  // namespace dpseq

#include "dpseq/privacy.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace dpseq {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double hi = std::max(a, b), lo = std::min(a, b);
  return hi + std::log1p(std::exp(lo - hi));
}

// log(exp(a) - exp(b)) for a >= b.
double log_sub(double a, double b) {
  if (b == -kInf) return a;
  if (a == b) return -kInf;
  if (a < b) throw std::domain_error("log_sub: negative difference");
  return a + std::log1p(-std::exp(b - a));
}

double log_erfc(double x) {
  if (x < 8.0) return std::log(std::erfc(x));
  // Asymptotic expansion for large x where erfc underflows.
  const double x2 = x * x;
  return -x2 - std::log(x * std::sqrt(M_PI)) +
         std::log1p(-0.5 / x2 + 0.75 / (x2 * x2));
}

double log_comb(double n, double k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// log E_{z~mu0}[(mu(z)/mu0(z))^alpha] for integer alpha via the exact
// binomial expansion; all terms are positive.
double log_a_int(double q, double sigma, long long alpha) {
  double acc = -kInf;
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  for (long long k = 0; k <= alpha; ++k) {
    const double term =
        log_comb(static_cast<double>(alpha), static_cast<double>(k)) +
        k * log_q + (alpha - k) * log_1mq +
        (static_cast<double>(k) * (k - 1)) / (2.0 * sigma * sigma);
    acc = log_add(acc, term);
  }
  return acc;
}

// Fractional-order evaluation via the two-sided binomial series split at the
// crossover point z0 of the two Gaussians.
double log_a_frac(double q, double sigma, double alpha) {
  double log_a0 = -kInf, log_a1 = -kInf;
  const double z0 = sigma * sigma * std::log(1.0 / q - 1.0) + 0.5;
  double log_coef_abs = 0.0;  // log |binom(alpha, i)|, updated iteratively
  int sign = 1;
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  for (int i = 0;; ++i) {
    if (i > 0) {
      const double factor = (alpha - (i - 1)) / static_cast<double>(i);
      if (factor == 0.0) break;
      log_coef_abs += std::log(std::abs(factor));
      if (factor < 0.0) sign = -sign;
    }
    const double j = alpha - i;
    const double log_t0 = log_coef_abs + i * log_q + j * log_1mq;
    const double log_t1 = log_coef_abs + j * log_q + i * log_1mq;
    const double log_e0 =
        std::log(0.5) + log_erfc((i - z0) / (M_SQRT2 * sigma));
    const double log_e1 =
        std::log(0.5) + log_erfc((z0 - j) / (M_SQRT2 * sigma));
    const double log_s0 =
        log_t0 + (i * static_cast<double>(i) - i) / (2.0 * sigma * sigma) +
        log_e0;
    const double log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
    if (sign > 0) {
      log_a0 = log_add(log_a0, log_s0);
      log_a1 = log_add(log_a1, log_s1);
    } else {
      log_a0 = log_sub(log_a0, log_s0);
      log_a1 = log_sub(log_a1, log_s1);
    }
    // The tail decays polynomially and alternates in sign; truncating below
    // e^-30 against A >= 1 is far inside double precision.
    if (i >= 2 && std::max(log_s0, log_s1) < -30.0) break;
    if (i > 100000) {
      throw std::runtime_error("log_a_frac: series not converging");
    }
  }
  return log_add(log_a0, log_a1);
}

}  // namespace

std::vector<double> default_rdp_orders() {
  std::vector<double> orders = {1.25, 1.5};
  for (int a = 2; a <= 64; ++a) orders.push_back(a);
  orders.push_back(128.0);
  orders.push_back(256.0);
  return orders;
}

double rdp_subsampled_gaussian(double q, double sigma, double alpha) {
  if (sigma <= 0.0) throw std::invalid_argument("rdp: sigma <= 0");
  if (q <= 0.0 || q > 1.0) throw std::invalid_argument("rdp: q not in (0,1]");
  if (alpha <= 1.0) throw std::invalid_argument("rdp: alpha <= 1");
  if (q == 1.0) return alpha / (2.0 * sigma * sigma);
  const double rounded = std::round(alpha);
  double log_a;
  if (std::abs(alpha - rounded) < 1e-9) {
    log_a = log_a_int(q, sigma, static_cast<long long>(rounded));
  } else {
    log_a = log_a_frac(q, sigma, alpha);
  }
  return std::max(0.0, log_a / (alpha - 1.0));
}

double rdp_epsilon(const PrivacyLedger& ledger, double* best_alpha) {
  if (ledger.delta <= 0.0 || ledger.delta >= 1.0) {
    throw std::invalid_argument("rdp_epsilon: delta not in (0,1)");
  }
  if (ledger.rdp_orders.empty()) {
    throw std::invalid_argument("rdp_epsilon: empty order grid");
  }
  if (ledger.steps_taken == 0) return 0.0;
  if (ledger.sigma_dp == 0.0) return kInf;  // noiseless release
  const double log_inv_delta = std::log(1.0 / ledger.delta);
  double best = kInf;
  double arg = ledger.rdp_orders.front();
  for (double alpha : ledger.rdp_orders) {
    const double rdp = rdp_subsampled_gaussian(ledger.q, ledger.sigma_dp, alpha);
    const double eps =
        static_cast<double>(ledger.steps_taken) * rdp +
        log_inv_delta / (alpha - 1.0);
    if (eps < best) {
      best = eps;
      arg = alpha;
    }
  }
  if (best_alpha) *best_alpha = arg;
  return best;
}

double rdp_epsilon(const PrivacyLedger& ledger) {
  return rdp_epsilon(ledger, nullptr);
}

double calibrate_sigma(double epsilon_target, double delta, double q,
                       long long steps, const std::vector<double>& orders) {
  if (epsilon_target <= 0.0) {
    throw std::invalid_argument("calibrate_sigma: epsilon_target <= 0");
  }
  constexpr double kLo = 0.3, kHi = 50.0;
  auto eps_at = [&](double sigma) {
    PrivacyLedger l;
    l.sigma_dp = sigma;
    l.q = q;
    l.steps_taken = steps;
    l.delta = delta;
    l.rdp_orders = orders;
    return rdp_epsilon(l);
  };
  const double eps_lo = eps_at(kLo);
  const double eps_hi = eps_at(kHi);
  if (eps_hi > epsilon_target) {
    throw std::runtime_error(
        "calibrate_sigma: target unreachable within sigma bracket [0.3, 50] "
        "(epsilon at sigma=50 still exceeds target)");
  }
  if (eps_lo <= epsilon_target) {
    if (eps_lo < 0.999 * epsilon_target) {
      throw std::runtime_error(
          "calibrate_sigma: target unreachable within sigma bracket [0.3, 50] "
          "(epsilon at sigma=0.3 already below 0.999 * target)");
    }
    return kLo;
  }
  double lo = kLo, hi = kHi;  // eps(lo) > target >= eps(hi)
  for (int it = 0; it < 200; ++it) {
    const double eps_h = eps_at(hi);
    if (eps_h >= 0.999 * epsilon_target && eps_h <= epsilon_target) break;
    const double mid = 0.5 * (lo + hi);
    if (eps_at(mid) <= epsilon_target) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

TensorSet dp_step(const TensorSet& summed_clipped_grad, double C,
                  double sigma_dp, double B_nominal, Rng& rng) {
  if (sigma_dp < 0.0) throw std::invalid_argument("dp_step: sigma_dp < 0");
  if (C <= 0.0) throw std::invalid_argument("dp_step: C <= 0");
  if (B_nominal <= 0.0) throw std::invalid_argument("dp_step: B_nominal <= 0");
  TensorSet out = summed_clipped_grad;
  const double noise_scale = sigma_dp * C;
  const double inv_b = 1.0 / B_nominal;
  for (auto& t : out.tensors) {
    for (double& v : t.data) {
      if (noise_scale > 0.0) v += noise_scale * rng.next_gaussian();
      v *= inv_b;
    }
    require_finite(t, "dp_step output");
  }
  return out;
}

}  // namespace dpseq

#include "dpseq/reattention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dpseq/transformer.hpp"

namespace dpseq {

namespace {

constexpr double kLnEps = 1e-5;

double std_normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

// Variance rule for y = x * W with independent isotropic uncertainty; the
// squared-mean terms enter through per-tensor mean squares.
double linear_variance(double x_var, double x_mean_sq, double w_var,
                       double w_mean_sq) {
  return x_var * w_var + x_mean_sq * w_var + w_mean_sq * x_var;
}

}  // namespace

EffectiveError effective_errors(double sigma_dp, double batch_size,
                                const FrequencyTable& frequencies) {
  if (batch_size < 1.0) {
    throw std::invalid_argument("effective_errors: batch size < 1");
  }
  if (sigma_dp < 0.0) {
    throw std::invalid_argument("effective_errors: sigma_dp < 0");
  }
  EffectiveError e;
  e.sigma_dp = sigma_dp;
  e.batch_size = batch_size;
  e.weight_sigma = sigma_dp / batch_size;
  e.token_sigma.resize(frequencies.p.size());
  for (std::size_t i = 0; i < frequencies.p.size(); ++i) {
    const double p = frequencies.p[i];
    if (p <= 0.0 || p > 1.0) {
      throw std::invalid_argument(
          "effective_errors: token frequency outside (0,1] (token should have "
          "been filtered)");
    }
    e.token_sigma[i] = sigma_dp / (batch_size * p);
  }
  return e;
}

GaussianMoments propagate_linear(const GaussianMoments& x,
                                 const GaussianMoments& w) {
  if (x.variance < 0.0 || w.variance < 0.0) {
    throw std::invalid_argument("propagate_linear: negative variance");
  }
  GaussianMoments out;
  out.mean = matmul(x.mean, w.mean);
  out.variance = linear_variance(x.variance, mean_square(x.mean.data),
                                 w.variance, mean_square(w.mean.data));
  return out;
}

void gaussian_max_moments(double mu1, double var1, double mu2, double var2,
                          double& mean_out, double& var_out) {
  if (var1 < 0.0 || var2 < 0.0) {
    throw std::invalid_argument("gaussian_max_moments: negative variance");
  }
  const double nu = std::sqrt(var1 + var2);
  if (nu == 0.0) {
    mean_out = std::max(mu1, mu2);
    var_out = 0.0;
    return;
  }
  const double gamma = (mu1 - mu2) / nu;
  const double cdf = std_normal_cdf(gamma);
  const double cdf_neg = std_normal_cdf(-gamma);
  const double pdf = std_normal_pdf(gamma);
  mean_out = mu1 * cdf + mu2 * cdf_neg + nu * pdf;
  const double second = (mu1 * mu1 + var1) * cdf + (mu2 * mu2 + var2) * cdf_neg +
                        (mu1 + mu2) * nu * pdf;
  var_out = std::max(0.0, second - mean_out * mean_out);
}

GaussianMoments propagate_relu(const GaussianMoments& x) {
  if (x.variance < 0.0) {
    throw std::invalid_argument("propagate_relu: negative variance");
  }
  GaussianMoments out;
  out.mean = x.mean;
  double var_acc = 0.0;
  for (double& m : out.mean.data) {
    double mean_c, var_c;
    gaussian_max_moments(m, x.variance, 0.0, 0.0, mean_c, var_c);
    m = mean_c;
    var_acc += var_c;
  }
  out.variance = x.mean.size() ? var_acc / static_cast<double>(x.mean.size())
                               : 0.0;
  return out;
}

GaussianMoments propagate_gelu(const GaussianMoments& x) {
  return propagate_relu(x);
}

GaussianMoments propagate_residual(const GaussianMoments& a,
                                   const GaussianMoments& b) {
  if (a.mean.shape != b.mean.shape) {
    throw std::invalid_argument("propagate_residual: shape mismatch");
  }
  GaussianMoments out;
  out.mean = a.mean;
  for (std::size_t i = 0; i < out.mean.size(); ++i) {
    out.mean.data[i] += b.mean.data[i];
  }
  out.variance = a.variance + b.variance;
  return out;
}

std::size_t reattend(std::span<double> scores, std::span<const double> query,
                     std::span<const double> sigma_sq, bool renormalize,
                     double clamp) {
  if (sigma_sq.size() < scores.size()) {
    throw std::invalid_argument("reattend: sigma_sq shorter than scores");
  }
  const double qq = dot(query.data(), query.data(), query.size());
  std::size_t clamped = 0;
  bool any = false;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] != 0.0 && qq * sigma_sq[i] != 0.0) {
      any = true;
      break;
    }
  }
  if (!any) return 0;  // all correction exponents are zero: row untouched
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] == 0.0) continue;
    double e = 0.5 * qq * sigma_sq[i];
    if (e > clamp) {
      e = clamp;
      ++clamped;
    }
    scores[i] *= std::exp(-e);
    z += scores[i];
  }
  if (renormalize && z > 0.0) {
    for (double& s : scores) s /= z;
  }
  return clamped;
}

ReattentionContext key_variances(const ModelParams& params,
                                 const EffectiveError& errors,
                                 const SequenceBatch& batch) {
  const ModelConfig& cfg = params.config;
  const std::size_t B = batch.sample_count;
  const std::size_t L = batch.max_len;
  const std::size_t d = cfg.dim;
  const std::size_t dff = cfg.ffn_dim;
  const std::size_t nh = cfg.n_heads;
  const std::size_t dh = d / nh;
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double w_var = errors.weight_sigma * errors.weight_sigma;

  ReattentionContext ctx;
  ctx.sigma_sq.assign(cfg.n_blocks, Array::zeros({B, L}));

  std::vector<double> var(L);
  for (std::size_t i = 0; i < B; ++i) {
    // Mean path seeded with the current (noisy) parameters; per-position
    // scalar variance seeded with the token's squared effective error.
    Array x_mean = Array::zeros({L, d});
    std::size_t lo0 = L;
    for (std::size_t t = 0; t < L; ++t) {
      const int tok = batch.token(i, t);
      double* r = x_mean.row(t);
      const double* pe = params.pos_embedding.row(t);
      for (std::size_t c = 0; c < d; ++c) r[c] = pe[c];
      if (tok != 0) {
        if (lo0 == L) lo0 = t;
        const double* e = params.embedding.row(tok - 1);
        for (std::size_t c = 0; c < d; ++c) r[c] += e[c];
        const double ts = errors.token_sigma[tok - 1];
        var[t] = ts * ts;
      } else {
        var[t] = 0.0;
      }
    }

    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      const BlockParams& blk = params.blocks[b];
      // Layernorm: mean path normalized; variance scaled by
      // (gain / std-of-the-mean-path)^2 per position.
      Array a_mean = Array::zeros({L, d});
      std::vector<double> ln_var(L);
      const double gain_sq = mean_square(blk.ln1_gain.data);
      for (std::size_t t = 0; t < L; ++t) {
        const double* xr = x_mean.row(t);
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += xr[c];
        mu /= static_cast<double>(d);
        double v = 0.0;
        for (std::size_t c = 0; c < d; ++c) v += (xr[c] - mu) * (xr[c] - mu);
        v /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(v + kLnEps);
        double* ar = a_mean.row(t);
        for (std::size_t c = 0; c < d; ++c) {
          ar[c] = (xr[c] - mu) * inv * blk.ln1_gain.data[c] +
                  blk.ln1_bias.data[c];
        }
        ln_var[t] = var[t] * gain_sq * inv * inv;
      }

      const double wk_sq = mean_square(blk.w_k.data);
      for (std::size_t t = 0; t < L; ++t) {
        ctx.sigma_sq[b].at(i, t) = linear_variance(
            ln_var[t], mean_square(std::span<const double>(a_mean.row(t), d)),
            w_var, wk_sq);
      }
      if (b + 1 == cfg.n_blocks) break;  // no need to finish the last block

      // Attention sublayer on the mean path.
      Array q_mean = matmul(a_mean, blk.w_q);
      Array k_mean = matmul(a_mean, blk.w_k);
      Array v_mean = matmul(a_mean, blk.w_v);
      const double wv_sq = mean_square(blk.w_v.data);
      std::vector<double> v_var(L);
      for (std::size_t t = 0; t < L; ++t) {
        v_var[t] = linear_variance(
            ln_var[t], mean_square(std::span<const double>(a_mean.row(t), d)),
            w_var, wv_sq);
      }
      Array probs_avg = Array::zeros({L, L});  // head-averaged attention
      Array mixed = Array::zeros({L, d});
      std::vector<double> scores(L);
      for (std::size_t h = 0; h < nh; ++h) {
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t lo = t >= lo0 ? lo0 : t;
          const double* qr = q_mean.row(t) + h * dh;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = lo; j <= t; ++j) {
            scores[j] = score_scale * dot(qr, k_mean.row(j) + h * dh, dh);
            mx = std::max(mx, scores[j]);
          }
          double z = 0.0;
          for (std::size_t j = lo; j <= t; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            z += scores[j];
          }
          double* out = mixed.row(t) + h * dh;
          for (std::size_t j = lo; j <= t; ++j) {
            const double s = scores[j] / z;
            probs_avg.at(t, j) += s / static_cast<double>(nh);
            const double* vr = v_mean.row(j) + h * dh;
            for (std::size_t c = 0; c < dh; ++c) out[c] += s * vr[c];
          }
        }
      }
      // Value mixing with the mean-path probabilities as constants:
      // Var[sum_j s_j V_j] = sum_j s_j^2 Var[V_j].
      std::vector<double> mix_var(L, 0.0);
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t lo = t >= lo0 ? lo0 : t;
        for (std::size_t j = lo; j <= t; ++j) {
          const double s = probs_avg.at(t, j);
          mix_var[t] += s * s * v_var[j];
        }
      }
      const double wo_sq = mean_square(blk.w_o.data);
      Array o_mean = matmul(mixed, blk.w_o);
      for (std::size_t t = 0; t < L; ++t) {
        const double ov = linear_variance(
            mix_var[t], mean_square(std::span<const double>(mixed.row(t), d)),
            w_var, wo_sq);
        var[t] += ov;  // residual add
        double* xr = x_mean.row(t);
        const double* orow = o_mean.row(t);
        for (std::size_t c = 0; c < d; ++c) xr[c] += orow[c];
      }

      // FFN sublayer.
      Array f_mean = Array::zeros({L, d});
      std::vector<double> f_var(L);
      const double gain2_sq = mean_square(blk.ln2_gain.data);
      for (std::size_t t = 0; t < L; ++t) {
        const double* xr = x_mean.row(t);
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += xr[c];
        mu /= static_cast<double>(d);
        double v = 0.0;
        for (std::size_t c = 0; c < d; ++c) v += (xr[c] - mu) * (xr[c] - mu);
        v /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(v + kLnEps);
        double* fr = f_mean.row(t);
        for (std::size_t c = 0; c < d; ++c) {
          fr[c] = (xr[c] - mu) * inv * blk.ln2_gain.data[c] +
                  blk.ln2_bias.data[c];
        }
        f_var[t] = var[t] * gain2_sq * inv * inv;
      }
      Array h_mean = matmul(f_mean, blk.w1);
      const double w1_sq = mean_square(blk.w1.data);
      const double w2_sq = mean_square(blk.w2.data);
      for (std::size_t t = 0; t < L; ++t) {
        double* hr = h_mean.row(t);
        for (std::size_t c = 0; c < dff; ++c) hr[c] += blk.b1.data[c];
        double hv = linear_variance(
            f_var[t], mean_square(std::span<const double>(f_mean.row(t), d)),
            w_var, w1_sq);
        hv += w_var;  // bias uncertainty
        // Activation via the max(., 0) closed form, coordinate-wise means,
        // averaged variance.
        double va = 0.0;
        for (std::size_t c = 0; c < dff; ++c) {
          double m, v2;
          gaussian_max_moments(hr[c], hv, 0.0, 0.0, m, v2);
          hr[c] = m;
          va += v2;
        }
        va /= static_cast<double>(dff);
        const double f2v =
            linear_variance(
                va, mean_square(std::span<const double>(hr, dff)), w_var,
                w2_sq) +
            w_var;
        var[t] += f2v;  // residual add
      }
      // Mean through W2 (the variances above already account for it).
      Array f2_mean = matmul(h_mean, blk.w2);
      for (std::size_t t = 0; t < L; ++t) {
        double* xr = x_mean.row(t);
        const double* fr = f2_mean.row(t);
        for (std::size_t c = 0; c < d; ++c) xr[c] += fr[c] + blk.b2.data[c];
      }
    }
  }
  return ctx;
}

std::vector<double> distraction_monte_carlo(std::span<const double> query,
                                            const Array& key_means,
                                            std::span<const double> sigma_sq,
                                            std::size_t n_samples, Rng& rng) {
  const std::size_t L = key_means.rows();
  const std::size_t d = key_means.cols();
  if (query.size() != d || sigma_sq.size() != L) {
    throw std::invalid_argument("distraction_monte_carlo: shape mismatch");
  }
  if (n_samples == 0) {
    throw std::invalid_argument("distraction_monte_carlo: n_samples == 0");
  }
  std::vector<double> mean_scores(L, 0.0);
  std::vector<double> logits(L);
  std::vector<double> key(d);
  for (std::size_t s = 0; s < n_samples; ++s) {
    for (std::size_t i = 0; i < L; ++i) {
      const double sd = std::sqrt(sigma_sq[i]);
      const double* km = key_means.row(i);
      double acc = 0.0;
      if (sd == 0.0) {
        acc = dot(query.data(), km, d);
      } else {
        for (std::size_t c = 0; c < d; ++c) {
          key[c] = km[c] + sd * rng.next_gaussian();
        }
        acc = dot(query.data(), key.data(), d);
      }
      logits[i] = acc;
    }
    const auto probs = stable_softmax(logits);
    for (std::size_t i = 0; i < L; ++i) mean_scores[i] += probs[i];
  }
  for (double& v : mean_scores) v /= static_cast<double>(n_samples);
  return mean_scores;
}

}  // namespace dpseq

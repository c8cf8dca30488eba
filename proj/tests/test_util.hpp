#pragma once

#include <cmath>
#include <vector>

#include "dpseq/numkit.hpp"
#include "dpseq/seqdata.hpp"
#include "dpseq/transformer.hpp"

namespace dpseq::testutil {

// Random model + batch fixtures for oracle comparisons.
struct TinyInstance {
  ModelConfig config;
  ModelParams params;
  SequenceBatch batch;
};

inline SequenceBatch random_batch(std::size_t B, std::size_t L, std::size_t M,
                                  Rng& rng, bool force_duplicates = false,
                                  std::size_t min_len = 2) {
  SequenceBatch b;
  b.sample_count = B;
  b.max_len = L;
  b.tokens.assign(B * L, 0);
  b.targets.assign(B * L, 0);
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t len = min_len + rng.next_index(L - min_len + 1);
    const std::size_t off = L - len;
    // A small pool forces repeated tokens inside one sequence.
    const std::size_t pool =
        force_duplicates ? std::max<std::size_t>(2, len / 2) : M;
    for (std::size_t t = 0; t < len; ++t) {
      b.tokens[i * L + off + t] = 1 + static_cast<int>(rng.next_index(pool));
      if (t > 0) b.targets[i * L + off + t - 1] = b.tokens[i * L + off + t];
    }
  }
  return b;
}

inline TinyInstance random_instance(std::size_t B, std::size_t L, std::size_t M,
                                    std::size_t d, std::size_t n_blocks,
                                    std::size_t n_heads, bool share,
                                    double dropout, Rng& rng,
                                    bool force_duplicates = false) {
  TinyInstance ti;
  ti.config.vocab_size = M;
  ti.config.max_len = L;
  ti.config.dim = d;
  ti.config.ffn_dim = d;
  ti.config.n_blocks = n_blocks;
  ti.config.n_heads = n_heads;
  ti.config.share_embedding = share;
  ti.config.dropout = dropout;
  Rng init = rng.stream(kInitStream, rng.next_u64());
  ti.params = init_params(ti.config, init);
  Rng brng = rng.stream(kDataStream, rng.next_u64());
  ti.batch = random_batch(B, L, M, brng, force_duplicates);
  return ti;
}

// Loop-based cross-entropy, independent of loss_next_token.
inline double naive_cross_entropy(const Array& logits,
                                  const SequenceBatch& batch,
                                  std::vector<double>* per_sample = nullptr) {
  const std::size_t B = logits.shape[0], L = logits.shape[1],
                    M = logits.shape[2];
  double mean = 0.0;
  if (per_sample) per_sample->assign(B, 0.0);
  for (std::size_t i = 0; i < B; ++i) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < L; ++t) {
      const int y = batch.target(i, t);
      if (y == 0) continue;
      const double* row = logits.data.data() + (i * L + t) * M;
      double z = 0.0;
      for (std::size_t m = 0; m < M; ++m) z += std::exp(row[m]);
      acc += std::log(z) - row[y - 1];
      ++n;
    }
    const double li = n ? acc / static_cast<double>(n) : 0.0;
    if (per_sample) (*per_sample)[i] = li;
    mean += li;
  }
  return mean / static_cast<double>(B);
}

// Instantiates the shared-embedding per-sample gradient from the two tape
// branches: scatter-add of grad_e_s rows plus grad_e_c.
inline Array scatter_embedding_grad(const std::vector<int>& tokens,
                                    const Array& grad_e_s, const Array& grad_e_c,
                                    std::size_t M) {
  const std::size_t L = tokens.size();
  const std::size_t d = grad_e_s.cols();
  Array g = grad_e_c.empty() ? Array::zeros({M, d}) : grad_e_c;
  for (std::size_t t = 0; t < L; ++t) {
    if (tokens[t] == 0) continue;
    double* row = g.row(tokens[t] - 1);
    const double* src = grad_e_s.row(t);
    for (std::size_t c = 0; c < d; ++c) row[c] += src[c];
  }
  return g;
}

inline double max_abs_diff(const TensorSet& a, const TensorSet& b) {
  double m = 0.0;
  for (std::size_t t = 0; t < a.tensors.size(); ++t) {
    for (std::size_t i = 0; i < a.tensors[t].size(); ++i) {
      m = std::max(m, std::abs(a.tensors[t].data[i] - b.tensors[t].data[i]));
    }
  }
  return m;
}

inline double rel_diff(double a, double b) {
  return std::abs(a - b) / (std::abs(b) + 1e-12);
}

// Quadrature evaluation of the subsampled-Gaussian Renyi integral
// E_{z~N(0,1)}[((1-q) + q e^{(2 sigma z - 1)/(2 sigma^2)})^alpha], done in log
// space with Simpson weights. Independent of the binomial-series route.
inline double log_a_quadrature(double q, double sigma, double alpha) {
  const double lo = -60.0;
  const double hi = std::max(60.0, alpha / sigma + 60.0);
  const std::size_t n = 400000;  // even
  const double h = (hi - lo) / static_cast<double>(n);
  auto log_f = [&](double z) {
    const double w = (2.0 * sigma * z - 1.0) / (2.0 * sigma * sigma);
    // log((1-q) + q e^w), stable for either sign of w.
    double lg;
    const double lq = std::log(q) + w;
    const double l1q = std::log1p(-q);
    if (lq > l1q) {
      lg = lq + std::log1p(std::exp(l1q - lq));
    } else {
      lg = l1q + std::log1p(std::exp(lq - l1q));
    }
    return -0.5 * z * z - 0.5 * std::log(2.0 * M_PI) + alpha * lg;
  };
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> vals(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    const double z = lo + h * static_cast<double>(i);
    double w = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    vals[i] = log_f(z) + std::log(w);
    best = std::max(best, vals[i]);
  }
  double acc = 0.0;
  for (double v : vals) acc += std::exp(v - best);
  return best + std::log(acc) + std::log(h / 3.0);
}

}  // namespace dpseq::testutil

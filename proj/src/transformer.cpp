#include "dpseq/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

namespace dpseq {

namespace {

constexpr double kLnEps = 1e-5;

double uniform_init(Rng& rng, double scale) {
  return scale * (2.0 * rng.next_double() - 1.0);
}

void fill_uniform(Array& a, Rng& rng, double scale) {
  for (double& v : a.data) v = uniform_init(rng, scale);
}

// Row-wise layernorm over the feature dimension.
void layernorm_forward(const Array& x, const Array& gain, const Array& bias,
                       Array& xhat, std::vector<double>& inv, Array& out) {
  const std::size_t T = x.rows(), d = x.cols();
  xhat = Array::zeros({T, d});
  out = Array::zeros({T, d});
  inv.assign(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double* xr = x.row(t);
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    const double iv = 1.0 / std::sqrt(var + kLnEps);
    inv[t] = iv;
    double* xh = xhat.row(t);
    double* o = out.row(t);
    for (std::size_t c = 0; c < d; ++c) {
      xh[c] = (xr[c] - mu) * iv;
      o[c] = xh[c] * gain.data[c] + bias.data[c];
    }
  }
}

// d_out is the gradient at the layernorm output; returns gradient at the
// input and accumulates per-sample gain/bias gradients.
void layernorm_backward(const Array& d_out, const Array& xhat,
                        const std::vector<double>& inv, const Array& gain,
                        Array& dgain, Array& dbias, Array& dx) {
  const std::size_t T = d_out.rows(), d = d_out.cols();
  dx = Array::zeros({T, d});
  for (std::size_t t = 0; t < T; ++t) {
    const double* g = d_out.row(t);
    const double* xh = xhat.row(t);
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dgain.data[c] += g[c] * xh[c];
      dbias.data[c] += g[c];
    }
    // dxhat = g * gain
    for (std::size_t c = 0; c < d; ++c) {
      const double dxh = g[c] * gain.data[c];
      m1 += dxh;
      m2 += dxh * xh[c];
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    double* out = dx.row(t);
    for (std::size_t c = 0; c < d; ++c) {
      const double dxh = g[c] * gain.data[c];
      out[c] = inv[t] * (dxh - m1 - xh[c] * m2);
    }
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

double act_forward(Activation a, double x) {
  return a == Activation::kRelu ? (x > 0.0 ? x : 0.0) : gelu(x);
}

double act_grad(Activation a, double x) {
  return a == Activation::kRelu ? (x > 0.0 ? 1.0 : 0.0) : gelu_grad(x);
}

std::size_t first_valid_pos(const std::vector<int>& tokens) {
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] != 0) return t;
  }
  return tokens.size();
}

Array make_dropout_mask(std::size_t r, std::size_t c, double rate, Rng& rng) {
  Array m = Array::zeros({r, c});
  const double keep = 1.0 / (1.0 - rate);
  for (double& v : m.data) v = rng.next_double() < rate ? 0.0 : keep;
  return m;
}

struct GradIndex {
  std::unordered_map<std::string, std::size_t> by_name;
  explicit GradIndex(const TensorSet& g) {
    for (std::size_t i = 0; i < g.names.size(); ++i) by_name[g.names[i]] = i;
  }
  std::size_t at(const std::string& n) const { return by_name.at(n); }
};

std::string block_name(std::size_t b, const char* field) {
  return "blocks[" + std::to_string(b) + "]." + field;
}

}  // namespace

ModelParams init_params(const ModelConfig& config, Rng& rng) {
  if (config.vocab_size == 0) throw std::invalid_argument("init_params: M == 0");
  if (config.dim == 0 || config.max_len == 0 || config.n_blocks == 0) {
    throw std::invalid_argument("init_params: zero dimension");
  }
  if (config.n_heads == 0 || config.dim % config.n_heads != 0) {
    throw std::invalid_argument("init_params: n_heads must divide dim");
  }
  if (config.dropout < 0.0 || config.dropout >= 1.0) {
    throw std::invalid_argument("init_params: dropout not in [0,1)");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.dim));
  ModelParams p;
  p.config = config;
  p.embedding = Array::zeros({config.vocab_size, config.dim});
  fill_uniform(p.embedding, rng, scale);
  if (!config.share_embedding) {
    p.out_embedding = Array::zeros({config.vocab_size, config.dim});
    fill_uniform(p.out_embedding, rng, scale);
  }
  p.pos_embedding = Array::zeros({config.max_len, config.dim});
  fill_uniform(p.pos_embedding, rng, scale);
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    BlockParams blk;
    blk.ln1_gain = Array::full({config.dim}, 1.0);
    blk.ln1_bias = Array::zeros({config.dim});
    blk.w_q = Array::zeros({config.dim, config.dim});
    blk.w_k = Array::zeros({config.dim, config.dim});
    blk.w_v = Array::zeros({config.dim, config.dim});
    blk.w_o = Array::zeros({config.dim, config.dim});
    fill_uniform(blk.w_q, rng, scale);
    fill_uniform(blk.w_k, rng, scale);
    fill_uniform(blk.w_v, rng, scale);
    fill_uniform(blk.w_o, rng, scale);
    blk.ln2_gain = Array::full({config.dim}, 1.0);
    blk.ln2_bias = Array::zeros({config.dim});
    blk.w1 = Array::zeros({config.dim, config.ffn_dim});
    blk.b1 = Array::zeros({config.ffn_dim});
    blk.w2 = Array::zeros({config.ffn_dim, config.dim});
    blk.b2 = Array::zeros({config.dim});
    fill_uniform(blk.w1, rng, scale);
    fill_uniform(blk.w2, rng, scale);
    p.blocks.push_back(std::move(blk));
  }
  p.lnf_gain = Array::full({config.dim}, 1.0);
  p.lnf_bias = Array::zeros({config.dim});
  return p;
}

std::vector<ParamRef> param_refs(ModelParams& p) {
  std::vector<ParamRef> refs;
  refs.push_back({"embedding", &p.embedding});
  if (!p.config.share_embedding) {
    refs.push_back({"out_embedding", &p.out_embedding});
  }
  refs.push_back({"pos_embedding", &p.pos_embedding});
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    auto& blk = p.blocks[b];
    refs.push_back({block_name(b, "ln1_gain"), &blk.ln1_gain});
    refs.push_back({block_name(b, "ln1_bias"), &blk.ln1_bias});
    refs.push_back({block_name(b, "w_q"), &blk.w_q});
    refs.push_back({block_name(b, "w_k"), &blk.w_k});
    refs.push_back({block_name(b, "w_v"), &blk.w_v});
    refs.push_back({block_name(b, "w_o"), &blk.w_o});
    refs.push_back({block_name(b, "ln2_gain"), &blk.ln2_gain});
    refs.push_back({block_name(b, "ln2_bias"), &blk.ln2_bias});
    refs.push_back({block_name(b, "w1"), &blk.w1});
    refs.push_back({block_name(b, "b1"), &blk.b1});
    refs.push_back({block_name(b, "w2"), &blk.w2});
    refs.push_back({block_name(b, "b2"), &blk.b2});
  }
  refs.push_back({"lnf_gain", &p.lnf_gain});
  refs.push_back({"lnf_bias", &p.lnf_bias});
  return refs;
}

std::vector<ConstParamRef> param_refs(const ModelParams& p) {
  auto refs = param_refs(const_cast<ModelParams&>(p));
  std::vector<ConstParamRef> out;
  out.reserve(refs.size());
  for (const auto& r : refs) out.push_back({r.name, r.tensor});
  return out;
}

TensorSet zeros_like(const ModelParams& params) {
  TensorSet g;
  for (const auto& r : param_refs(params)) {
    g.names.push_back(r.name);
    g.tensors.push_back(Array::zeros(r.tensor->shape));
  }
  return g;
}

ForwardResult forward(const ModelParams& params, const SequenceBatch& batch,
                      RunMode mode, const ReattentionContext* reattention,
                      Rng dropout_rng, const ForwardCache* mask_replay,
                      std::size_t replay_sample_offset) {
  const ModelConfig& cfg = params.config;
  const std::size_t B = batch.sample_count;
  const std::size_t L = batch.max_len;
  const std::size_t M = cfg.vocab_size;
  const std::size_t d = cfg.dim;
  const std::size_t dff = cfg.ffn_dim;
  const std::size_t nh = cfg.n_heads;
  const std::size_t dh = d / nh;
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (L != cfg.max_len) {
    throw std::invalid_argument("forward: batch max_len != model max_len");
  }
  if (reattention && reattention->sigma_sq.size() != cfg.n_blocks) {
    throw std::invalid_argument("forward: reattention context block mismatch");
  }

  ForwardResult res;
  res.logits = Array::zeros({B, L, M});
  res.cache.mode = mode;
  res.cache.dropout = mode == RunMode::kTrain ? cfg.dropout : 0.0;
  if (reattention) res.cache.reattention_renormalized = reattention->renormalize;
  res.cache.samples.resize(B);

  const bool use_dropout =
      (mode == RunMode::kTrain && cfg.dropout > 0.0) || mask_replay != nullptr;

  for (std::size_t i = 0; i < B; ++i) {
    SampleCache& sc = res.cache.samples[i];
    sc.tokens.assign(batch.tokens.begin() + i * L,
                     batch.tokens.begin() + (i + 1) * L);
    for (int tok : sc.tokens) {
      if (tok < 0 || static_cast<std::size_t>(tok) > M) {
        throw std::invalid_argument("forward: token id out of range");
      }
    }
    const std::size_t lo0 = first_valid_pos(sc.tokens);
    Rng sample_rng = dropout_rng.stream(i);
    const SampleCache* replay =
        mask_replay ? &mask_replay->samples.at(replay_sample_offset + i)
                    : nullptr;

    sc.x0 = Array::zeros({L, d});
    for (std::size_t t = 0; t < L; ++t) {
      double* x = sc.x0.row(t);
      const double* pe = params.pos_embedding.row(t);
      for (std::size_t c = 0; c < d; ++c) x[c] = pe[c];
      if (sc.tokens[t] != 0) {
        const double* e = params.embedding.row(sc.tokens[t] - 1);
        for (std::size_t c = 0; c < d; ++c) x[c] += e[c];
      }
    }

    Array x = sc.x0;
    sc.blocks.resize(cfg.n_blocks);
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      const BlockParams& blk = params.blocks[b];
      BlockCache& bc = sc.blocks[b];

      layernorm_forward(x, blk.ln1_gain, blk.ln1_bias, bc.ln1_xhat, bc.ln1_inv,
                        bc.attn_in);
      bc.q = Array::zeros({L, d});
      bc.k = Array::zeros({L, d});
      bc.v = Array::zeros({L, d});
      matmul_nn(bc.q.data.data(), bc.attn_in.data.data(), blk.w_q.data.data(),
                L, d, d, false);
      matmul_nn(bc.k.data.data(), bc.attn_in.data.data(), blk.w_k.data.data(),
                L, d, d, false);
      matmul_nn(bc.v.data.data(), bc.attn_in.data.data(), blk.w_v.data.data(),
                L, d, d, false);

      bc.attn_pre.assign(nh, Array());
      if (reattention) bc.attn_post.assign(nh, Array());
      if (use_dropout) bc.attn_drop_mask.assign(nh, Array());
      bc.attn_mixed = Array::zeros({L, d});

      std::vector<double> scores(L);
      std::vector<double> q_scaled(dh);
      for (std::size_t h = 0; h < nh; ++h) {
        Array& spre = bc.attn_pre[h];
        spre = Array::zeros({L, L});
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t lo = t >= lo0 ? lo0 : t;
          const std::size_t hi = t;
          const double* qr = bc.q.row(t) + h * dh;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = lo; j <= hi; ++j) {
            scores[j] = score_scale * dot(qr, bc.k.row(j) + h * dh, dh);
            mx = std::max(mx, scores[j]);
          }
          double z = 0.0;
          double* sp = spre.row(t);
          for (std::size_t j = lo; j <= hi; ++j) {
            sp[j] = std::exp(scores[j] - mx);
            z += sp[j];
          }
          for (std::size_t j = lo; j <= hi; ++j) sp[j] /= z;
        }
        const Array* s_used = &spre;
        if (reattention) {
          Array& spost = bc.attn_post[h];
          spost = spre;
          const Array& ss = reattention->sigma_sq[b];
          for (std::size_t t = 0; t < L; ++t) {
            const double* qr = bc.q.row(t) + h * dh;
            for (std::size_t c = 0; c < dh; ++c) q_scaled[c] = qr[c] * score_scale;
            reattention->clamped += reattend(
                std::span<double>(spost.row(t), L),
                std::span<const double>(q_scaled.data(), dh),
                std::span<const double>(ss.row(i), L),
                reattention->renormalize, reattention->exponent_clamp);
          }
          s_used = &spost;
        }
        Array* mask = nullptr;
        if (use_dropout) {
          if (replay) {
            bc.attn_drop_mask[h] = replay->blocks[b].attn_drop_mask.empty()
                                       ? Array()
                                       : replay->blocks[b].attn_drop_mask[h];
          } else {
            bc.attn_drop_mask[h] =
                make_dropout_mask(L, L, cfg.dropout, sample_rng);
          }
          if (!bc.attn_drop_mask[h].empty()) mask = &bc.attn_drop_mask[h];
        }
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t lo = t >= lo0 ? lo0 : t;
          double* out = bc.attn_mixed.row(t) + h * dh;
          const double* sp = s_used->row(t);
          for (std::size_t j = lo; j <= t; ++j) {
            double w = sp[j];
            if (mask) w *= mask->at(t, j);
            if (w == 0.0) continue;
            const double* vr = bc.v.row(j) + h * dh;
            for (std::size_t c = 0; c < dh; ++c) out[c] += w * vr[c];
          }
        }
      }

      bc.x1 = x;
      matmul_nn(bc.x1.data.data(), bc.attn_mixed.data.data(),
                blk.w_o.data.data(), L, d, d, true);

      layernorm_forward(bc.x1, blk.ln2_gain, blk.ln2_bias, bc.ln2_xhat,
                        bc.ln2_inv, bc.ffn_in);
      bc.h_pre = Array::zeros({L, dff});
      matmul_nn(bc.h_pre.data.data(), bc.ffn_in.data.data(), blk.w1.data.data(),
                L, d, dff, false);
      for (std::size_t t = 0; t < L; ++t) {
        double* r = bc.h_pre.row(t);
        for (std::size_t c = 0; c < dff; ++c) r[c] += blk.b1.data[c];
      }
      bc.h_act = Array::zeros({L, dff});
      for (std::size_t idx = 0; idx < bc.h_pre.size(); ++idx) {
        bc.h_act.data[idx] = act_forward(cfg.activation, bc.h_pre.data[idx]);
      }
      Array h_used = bc.h_act;
      if (use_dropout) {
        if (replay) {
          bc.ffn_drop_mask = replay->blocks[b].ffn_drop_mask;
        } else {
          bc.ffn_drop_mask = make_dropout_mask(L, dff, cfg.dropout, sample_rng);
        }
        if (!bc.ffn_drop_mask.empty()) {
          for (std::size_t idx = 0; idx < h_used.size(); ++idx) {
            h_used.data[idx] *= bc.ffn_drop_mask.data[idx];
          }
        }
      }
      Array x2 = bc.x1;
      matmul_nn(x2.data.data(), h_used.data.data(), blk.w2.data.data(), L, dff,
                d, true);
      for (std::size_t t = 0; t < L; ++t) {
        double* r = x2.row(t);
        for (std::size_t c = 0; c < d; ++c) r[c] += blk.b2.data[c];
      }
      x = std::move(x2);
    }

    layernorm_forward(x, params.lnf_gain, params.lnf_bias, sc.lnf_xhat,
                      sc.lnf_inv, sc.final_hidden);

    const Array& out_mat =
        cfg.share_embedding ? params.embedding : params.out_embedding;
    std::size_t n_sup = 0;
    for (std::size_t t = 0; t < L; ++t) {
      if (batch.target(i, t) != 0) ++n_sup;
    }
    sc.n_supervised = n_sup;
    for (std::size_t t = lo0; t < L; ++t) {
      double* lr = res.logits.data.data() + (i * L + t) * M;
      matmul_nt(lr, sc.final_hidden.row(t), out_mat.data.data(), 1, d, M,
                false);
    }
  }
  require_finite(res.logits, "forward logits");
  return res;
}

LossResult loss_next_token(const Array& logits, const SequenceBatch& batch) {
  if (logits.rank() != 3) throw std::invalid_argument("loss: logits not 3-D");
  const std::size_t B = logits.shape[0];
  const std::size_t L = logits.shape[1];
  const std::size_t M = logits.shape[2];
  if (B != batch.sample_count || L != batch.max_len) {
    throw std::invalid_argument("loss: batch/logits shape mismatch");
  }
  LossResult res;
  res.per_sample.assign(B, 0.0);
  res.dlogits = Array::zeros({B, L, M});
  bool any_supervised = false;
  for (std::size_t i = 0; i < B; ++i) {
    std::size_t n_sup = 0;
    for (std::size_t t = 0; t < L; ++t) {
      if (batch.target(i, t) != 0) ++n_sup;
    }
    if (n_sup == 0) continue;
    any_supervised = true;
    const double inv_n = 1.0 / static_cast<double>(n_sup);
    double loss = 0.0;
    for (std::size_t t = 0; t < L; ++t) {
      const int y = batch.target(i, t);
      if (y == 0) continue;
      if (y < 1 || static_cast<std::size_t>(y) > M) {
        throw std::invalid_argument("loss: target out of range");
      }
      const double* row = logits.data.data() + (i * L + t) * M;
      double mx = row[0];
      for (std::size_t m = 1; m < M; ++m) mx = std::max(mx, row[m]);
      double z = 0.0;
      for (std::size_t m = 0; m < M; ++m) z += std::exp(row[m] - mx);
      const double lse = mx + std::log(z);
      loss += lse - row[y - 1];
      double* g = res.dlogits.data.data() + (i * L + t) * M;
      for (std::size_t m = 0; m < M; ++m) {
        g[m] = std::exp(row[m] - lse) * inv_n;
      }
      g[y - 1] -= inv_n;
    }
    res.per_sample[i] = loss * inv_n;
    res.mean_loss += res.per_sample[i];
  }
  if (!any_supervised) {
    throw std::invalid_argument("loss: all positions padded");
  }
  res.mean_loss /= static_cast<double>(B);
  return res;
}

BackwardResult backward(const ModelParams& params, const ForwardCache& cache,
                        const Array& dlogits, std::span<const double> weights,
                        bool build_tape) {
  const ModelConfig& cfg = params.config;
  const std::size_t B = cache.samples.size();
  const std::size_t L = cfg.max_len;
  const std::size_t M = cfg.vocab_size;
  const std::size_t d = cfg.dim;
  const std::size_t dff = cfg.ffn_dim;
  const std::size_t nh = cfg.n_heads;
  const std::size_t dh = d / nh;
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (dlogits.rank() != 3 || dlogits.shape[0] != B || dlogits.shape[1] != L ||
      dlogits.shape[2] != M) {
    throw std::invalid_argument("backward: dlogits shape mismatch");
  }
  if (!weights.empty() && weights.size() != B) {
    throw std::invalid_argument("backward: weights length mismatch");
  }

  BackwardResult res;
  res.grad = zeros_like(params);
  GradIndex gi(res.grad);
  GradTape& tape = res.tape;
  if (build_tape) {
    tape.batch = B;
    tape.vocab_size = M;
    tape.dim = d;
    tape.share_embedding = cfg.share_embedding;
    tape.tokens.resize(B);
    tape.grad_e_s.resize(B);
    if (cfg.share_embedding) tape.grad_e_c.resize(B);
    if (!cfg.share_embedding) {
      tape.linears.push_back({"out_embedding", {}, {}});
    }
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      for (const char* f : {"w_q", "w_k", "w_v", "w_o", "w1", "w2"}) {
        tape.linears.push_back({block_name(b, f), {}, {}});
      }
    }
    for (auto& le : tape.linears) {
      le.inputs.resize(B);
      le.out_grads.resize(B);
    }
    tape.directs.push_back({"pos_embedding", {}});
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      for (const char* f : {"ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
                            "b1", "b2"}) {
        tape.directs.push_back({block_name(b, f), {}});
      }
    }
    tape.directs.push_back({"lnf_gain", {}});
    tape.directs.push_back({"lnf_bias", {}});
    for (auto& de : tape.directs) de.per_sample_grads.resize(B);
  }
  std::unordered_map<std::string, std::size_t> linear_slot, direct_slot;
  for (std::size_t s = 0; s < tape.linears.size(); ++s) {
    linear_slot[tape.linears[s].name] = s;
  }
  for (std::size_t s = 0; s < tape.directs.size(); ++s) {
    direct_slot[tape.directs[s].name] = s;
  }

  auto tape_linear = [&](const std::string& name, std::size_t i,
                         const Array& a, const Array& g) {
    if (!build_tape) return;
    auto& e = tape.linears[linear_slot.at(name)];
    e.inputs[i] = a;
    e.out_grads[i] = g;
  };
  auto tape_direct = [&](const std::string& name, std::size_t i, Array g) {
    if (!build_tape) return;
    tape.directs[direct_slot.at(name)].per_sample_grads[i] = std::move(g);
  };

  Array& e_grad = res.grad.tensors[gi.at("embedding")];
  Array& p_grad = res.grad.tensors[gi.at("pos_embedding")];

  for (std::size_t i = 0; i < B; ++i) {
    const SampleCache& sc = cache.samples[i];
    const double w = weights.empty() ? 1.0 : weights[i];
    const std::size_t lo0 = first_valid_pos(sc.tokens);
    if (build_tape) tape.tokens[i] = sc.tokens;

    // Weighted loss gradient at the logits.
    Array g({L, M}, std::vector<double>(dlogits.data.begin() + i * L * M,
                                        dlogits.data.begin() + (i + 1) * L * M));
    if (w != 1.0) {
      for (double& v : g.data) v *= w;
    }

    // Output projection through the (possibly shared) embedding.
    Array d_final = Array::zeros({L, d});
    Array grad_e_c;
    if (cfg.share_embedding) {
      grad_e_c = Array::zeros({M, d});
      matmul_tn(grad_e_c.data.data(), g.data.data(), sc.final_hidden.data.data(),
                M, L, d, false);
      for (std::size_t idx = 0; idx < grad_e_c.size(); ++idx) {
        e_grad.data[idx] += grad_e_c.data[idx];
      }
      matmul_nn(d_final.data.data(), g.data.data(), params.embedding.data.data(),
                L, M, d, false);
      if (build_tape) tape.grad_e_c[i] = std::move(grad_e_c);
    } else {
      Array& eo_grad = res.grad.tensors[gi.at("out_embedding")];
      matmul_tn(eo_grad.data.data(), g.data.data(), sc.final_hidden.data.data(),
                M, L, d, true);
      matmul_nn(d_final.data.data(), g.data.data(),
                params.out_embedding.data.data(), L, M, d, false);
      tape_linear("out_embedding", i, sc.final_hidden, g);
    }

    // Final layernorm.
    Array dgain_f = Array::zeros({d}), dbias_f = Array::zeros({d});
    Array dx;
    layernorm_backward(d_final, sc.lnf_xhat, sc.lnf_inv, params.lnf_gain,
                       dgain_f, dbias_f, dx);
    for (std::size_t c = 0; c < d; ++c) {
      res.grad.tensors[gi.at("lnf_gain")].data[c] += dgain_f.data[c];
      res.grad.tensors[gi.at("lnf_bias")].data[c] += dbias_f.data[c];
    }
    tape_direct("lnf_gain", i, std::move(dgain_f));
    tape_direct("lnf_bias", i, std::move(dbias_f));

    for (std::size_t b = cfg.n_blocks; b-- > 0;) {
      const BlockParams& blk = params.blocks[b];
      const BlockCache& bc = sc.blocks[b];
      // dx holds the gradient at the block output (x2).
      // FFN branch: x2 = x1 + dropout(act(ffn_in W1 + b1)) W2 + b2.
      Array h_used = bc.h_act;
      if (!bc.ffn_drop_mask.empty()) {
        for (std::size_t idx = 0; idx < h_used.size(); ++idx) {
          h_used.data[idx] *= bc.ffn_drop_mask.data[idx];
        }
      }
      Array db2 = Array::zeros({d});
      for (std::size_t t = 0; t < L; ++t) {
        const double* r = dx.row(t);
        for (std::size_t c = 0; c < d; ++c) db2.data[c] += r[c];
      }
      matmul_tn(res.grad.tensors[gi.at(block_name(b, "w2"))].data.data(),
                h_used.data.data(), dx.data.data(), dff, L, d, true);
      tape_linear(block_name(b, "w2"), i, h_used, dx);
      Array dhid = Array::zeros({L, dff});
      matmul_nt(dhid.data.data(), dx.data.data(), blk.w2.data.data(), L, d, dff,
                false);
      if (!bc.ffn_drop_mask.empty()) {
        for (std::size_t idx = 0; idx < dhid.size(); ++idx) {
          dhid.data[idx] *= bc.ffn_drop_mask.data[idx];
        }
      }
      for (std::size_t idx = 0; idx < dhid.size(); ++idx) {
        dhid.data[idx] *= act_grad(cfg.activation, bc.h_pre.data[idx]);
      }
      Array db1 = Array::zeros({dff});
      for (std::size_t t = 0; t < L; ++t) {
        const double* r = dhid.row(t);
        for (std::size_t c = 0; c < dff; ++c) db1.data[c] += r[c];
      }
      matmul_tn(res.grad.tensors[gi.at(block_name(b, "w1"))].data.data(),
                bc.ffn_in.data.data(), dhid.data.data(), d, L, dff, true);
      tape_linear(block_name(b, "w1"), i, bc.ffn_in, dhid);
      for (std::size_t c = 0; c < dff; ++c) {
        res.grad.tensors[gi.at(block_name(b, "b1"))].data[c] += db1.data[c];
      }
      for (std::size_t c = 0; c < d; ++c) {
        res.grad.tensors[gi.at(block_name(b, "b2"))].data[c] += db2.data[c];
      }
      tape_direct(block_name(b, "b1"), i, std::move(db1));
      tape_direct(block_name(b, "b2"), i, std::move(db2));
      Array d_ffn_in = Array::zeros({L, d});
      matmul_nt(d_ffn_in.data.data(), dhid.data.data(), blk.w1.data.data(), L,
                dff, d, false);
      Array dgain2 = Array::zeros({d}), dbias2 = Array::zeros({d});
      Array dx1_ln;
      layernorm_backward(d_ffn_in, bc.ln2_xhat, bc.ln2_inv, blk.ln2_gain,
                         dgain2, dbias2, dx1_ln);
      for (std::size_t c = 0; c < d; ++c) {
        res.grad.tensors[gi.at(block_name(b, "ln2_gain"))].data[c] +=
            dgain2.data[c];
        res.grad.tensors[gi.at(block_name(b, "ln2_bias"))].data[c] +=
            dbias2.data[c];
      }
      tape_direct(block_name(b, "ln2_gain"), i, std::move(dgain2));
      tape_direct(block_name(b, "ln2_bias"), i, std::move(dbias2));
      Array dx1 = dx;
      for (std::size_t idx = 0; idx < dx1.size(); ++idx) {
        dx1.data[idx] += dx1_ln.data[idx];
      }

      // Attention branch: x1 = x + (mixed W_O).
      matmul_tn(res.grad.tensors[gi.at(block_name(b, "w_o"))].data.data(),
                bc.attn_mixed.data.data(), dx1.data.data(), d, L, d, true);
      tape_linear(block_name(b, "w_o"), i, bc.attn_mixed, dx1);
      Array d_mixed = Array::zeros({L, d});
      matmul_nt(d_mixed.data.data(), dx1.data.data(), blk.w_o.data.data(), L, d,
                d, false);

      Array dq = Array::zeros({L, d});
      Array dk = Array::zeros({L, d});
      Array dv = Array::zeros({L, d});
      std::vector<double> ds_used(L), ds_pre(L), factors(L);
      for (std::size_t h = 0; h < nh; ++h) {
        const Array& spre = bc.attn_pre[h];
        const Array* spost = bc.attn_post.empty() ? nullptr : &bc.attn_post[h];
        const Array* mask =
            bc.attn_drop_mask.empty() || bc.attn_drop_mask[h].empty()
                ? nullptr
                : &bc.attn_drop_mask[h];
        const Array& s_used = spost ? *spost : spre;
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t lo = t >= lo0 ? lo0 : t;
          const double* dm = d_mixed.row(t) + h * dh;
          // dropout(S) V backward.
          for (std::size_t j = lo; j <= t; ++j) {
            const double mj = mask ? mask->at(t, j) : 1.0;
            const double sd = s_used.at(t, j) * mj;
            if (sd != 0.0) {
              double* dvj = dv.row(j) + h * dh;
              for (std::size_t c = 0; c < dh; ++c) dvj[c] += sd * dm[c];
            }
            ds_used[j] = mj * dot(dm, bc.v.row(j) + h * dh, dh);
          }
          if (spost) {
            // Correction backward with the factors held constant. The forward
            // stored both rows; with renormalization spost = f * spre / Z, so
            // the per-entry ratio recovers r_j = f_j / Z and
            //   dspre_j = r_j * (ds_j - <ds, spost>).
            // Without renormalization r_j = f_j and the inner term vanishes.
            for (std::size_t j = lo; j <= t; ++j) {
              const double sp = spre.at(t, j);
              factors[j] = sp > 0.0 ? spost->at(t, j) / sp : 0.0;
            }
            double inner = 0.0;
            if (cache.reattention_renormalized) {
              for (std::size_t j = lo; j <= t; ++j) {
                inner += ds_used[j] * spost->at(t, j);
              }
            }
            for (std::size_t j = lo; j <= t; ++j) {
              ds_pre[j] = factors[j] * (ds_used[j] - inner);
            }
          } else {
            for (std::size_t j = lo; j <= t; ++j) ds_pre[j] = ds_used[j];
          }
          // Softmax backward over the unmasked range.
          double inner2 = 0.0;
          for (std::size_t j = lo; j <= t; ++j) {
            inner2 += ds_pre[j] * spre.at(t, j);
          }
          double* dqr = dq.row(t) + h * dh;
          const double* qr = bc.q.row(t) + h * dh;
          for (std::size_t j = lo; j <= t; ++j) {
            const double dscore =
                spre.at(t, j) * (ds_pre[j] - inner2) * score_scale;
            if (dscore == 0.0) continue;
            const double* kr = bc.k.row(j) + h * dh;
            double* dkr = dk.row(j) + h * dh;
            for (std::size_t c = 0; c < dh; ++c) {
              dqr[c] += dscore * kr[c];
              dkr[c] += dscore * qr[c];
            }
          }
        }
      }
      matmul_tn(res.grad.tensors[gi.at(block_name(b, "w_q"))].data.data(),
                bc.attn_in.data.data(), dq.data.data(), d, L, d, true);
      matmul_tn(res.grad.tensors[gi.at(block_name(b, "w_k"))].data.data(),
                bc.attn_in.data.data(), dk.data.data(), d, L, d, true);
      matmul_tn(res.grad.tensors[gi.at(block_name(b, "w_v"))].data.data(),
                bc.attn_in.data.data(), dv.data.data(), d, L, d, true);
      tape_linear(block_name(b, "w_q"), i, bc.attn_in, dq);
      tape_linear(block_name(b, "w_k"), i, bc.attn_in, dk);
      tape_linear(block_name(b, "w_v"), i, bc.attn_in, dv);
      Array d_attn_in = Array::zeros({L, d});
      matmul_nt(d_attn_in.data.data(), dq.data.data(), blk.w_q.data.data(), L,
                d, d, false);
      matmul_nt(d_attn_in.data.data(), dk.data.data(), blk.w_k.data.data(), L,
                d, d, true);
      matmul_nt(d_attn_in.data.data(), dv.data.data(), blk.w_v.data.data(), L,
                d, d, true);
      Array dgain1 = Array::zeros({d}), dbias1 = Array::zeros({d});
      Array dx_ln;
      layernorm_backward(d_attn_in, bc.ln1_xhat, bc.ln1_inv, blk.ln1_gain,
                         dgain1, dbias1, dx_ln);
      for (std::size_t c = 0; c < d; ++c) {
        res.grad.tensors[gi.at(block_name(b, "ln1_gain"))].data[c] +=
            dgain1.data[c];
        res.grad.tensors[gi.at(block_name(b, "ln1_bias"))].data[c] +=
            dbias1.data[c];
      }
      tape_direct(block_name(b, "ln1_gain"), i, std::move(dgain1));
      tape_direct(block_name(b, "ln1_bias"), i, std::move(dbias1));
      for (std::size_t idx = 0; idx < dx1.size(); ++idx) {
        dx1.data[idx] += dx_ln.data[idx];
      }
      dx = std::move(dx1);
    }

    // Embedding add: x0 = e_s + P.
    for (std::size_t idx = 0; idx < dx.size(); ++idx) {
      p_grad.data[idx] += dx.data[idx];
    }
    for (std::size_t t = lo0; t < L; ++t) {
      const int tok = sc.tokens[t];
      double* er = e_grad.row(tok - 1);
      const double* r = dx.row(t);
      for (std::size_t c = 0; c < d; ++c) er[c] += r[c];
    }
    tape_direct("pos_embedding", i, dx);
    if (build_tape) tape.grad_e_s[i] = std::move(dx);
  }
  return res;
}

double finite_difference_check(const ModelParams& params,
                               const SequenceBatch& batch, double epsilon,
                               std::size_t n_coords, Rng& rng) {
  ModelParams work = params;
  auto refs = param_refs(work);

  auto loss_at = [&]() {
    auto fw = forward(work, batch, RunMode::kEval);
    return loss_next_token(fw.logits, batch).mean_loss;
  };

  auto fw = forward(work, batch, RunMode::kEval);
  auto loss = loss_next_token(fw.logits, batch);
  std::vector<double> w(batch.sample_count,
                        1.0 / static_cast<double>(batch.sample_count));
  auto bw = backward(work, fw.cache, loss.dlogits, w, /*build_tape=*/false);

  double max_rel = 0.0;
  for (std::size_t c = 0; c < n_coords; ++c) {
    const std::size_t r = c % refs.size();
    Array* tensor = refs[r].tensor;
    if (tensor->size() == 0) continue;
    const std::size_t idx = rng.next_index(tensor->size());
    const double orig = tensor->data[idx];
    tensor->data[idx] = orig + epsilon;
    const double up = loss_at();
    tensor->data[idx] = orig - epsilon;
    const double down = loss_at();
    tensor->data[idx] = orig;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double analytic = bw.grad.tensors[r].data[idx];
    const double rel = std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

namespace {

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  const char magic[8] = {'D', 'P', 'S', 'Q', 'C', 'P', '0', '1'};
  os.write(magic, 8);
  nlohmann::ordered_json cfg;
  cfg["vocab_size"] = params.config.vocab_size;
  cfg["max_len"] = params.config.max_len;
  cfg["dim"] = params.config.dim;
  cfg["ffn_dim"] = params.config.ffn_dim;
  cfg["n_blocks"] = params.config.n_blocks;
  cfg["n_heads"] = params.config.n_heads;
  cfg["share_embedding"] = params.config.share_embedding;
  cfg["activation"] =
      params.config.activation == Activation::kRelu ? "relu" : "gelu";
  cfg["dropout"] = params.config.dropout;
  const std::string cfg_str = cfg.dump();
  write_u64(os, cfg_str.size());
  os.write(cfg_str.data(), static_cast<std::streamsize>(cfg_str.size()));
  auto refs = param_refs(params);
  write_u64(os, refs.size());
  for (const auto& r : refs) {
    write_u64(os, r.name.size());
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    write_u64(os, r.tensor->shape.size());
    for (std::size_t e : r.tensor->shape) write_u64(os, e);
    write_u64(os, r.tensor->data.size());
    os.write(reinterpret_cast<const char*>(r.tensor->data.data()),
             static_cast<std::streamsize>(r.tensor->data.size() *
                                          sizeof(double)));
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed");
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "DPSQCP01", 8) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic/version");
  }
  const std::uint64_t cfg_len = read_u64(is);
  std::string cfg_str(cfg_len, '\0');
  is.read(cfg_str.data(), static_cast<std::streamsize>(cfg_len));
  const auto cfg = nlohmann::json::parse(cfg_str);
  ModelConfig config;
  config.vocab_size = cfg.at("vocab_size").get<std::size_t>();
  config.max_len = cfg.at("max_len").get<std::size_t>();
  config.dim = cfg.at("dim").get<std::size_t>();
  config.ffn_dim = cfg.at("ffn_dim").get<std::size_t>();
  config.n_blocks = cfg.at("n_blocks").get<std::size_t>();
  config.n_heads = cfg.at("n_heads").get<std::size_t>();
  config.share_embedding = cfg.at("share_embedding").get<bool>();
  config.activation = cfg.at("activation").get<std::string>() == "gelu"
                          ? Activation::kGelu
                          : Activation::kRelu;
  config.dropout = cfg.at("dropout").get<double>();
  Rng dummy(0);
  ModelParams params = init_params(config, dummy);
  auto refs = param_refs(params);
  const std::uint64_t n = read_u64(is);
  if (n != refs.size()) {
    throw std::runtime_error("load_checkpoint: tensor count mismatch");
  }
  for (auto& r : refs) {
    const std::uint64_t name_len = read_u64(is);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    if (name != r.name) {
      throw std::runtime_error("load_checkpoint: tensor order mismatch at " +
                               name);
    }
    const std::uint64_t rank = read_u64(is);
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = read_u64(is);
    if (shape != r.tensor->shape) {
      throw std::runtime_error("load_checkpoint: shape mismatch at " + name);
    }
    const std::uint64_t count = read_u64(is);
    if (count != r.tensor->data.size()) {
      throw std::runtime_error("load_checkpoint: size mismatch at " + name);
    }
    is.read(reinterpret_cast<char*>(r.tensor->data.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
  }
  if (!is) throw std::runtime_error("load_checkpoint: truncated file");
  return params;
}

}  // namespace dpseq

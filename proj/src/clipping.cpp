#include "dpseq/clipping.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace dpseq {

std::atomic<long long> MemMeter::current_{0};
std::atomic<long long> MemMeter::peak_{0};

void MemMeter::reset() {
  current_.store(0);
  peak_.store(0);
}

void MemMeter::add(std::size_t floats) {
  const long long now = current_.fetch_add(static_cast<long long>(floats)) +
                        static_cast<long long>(floats);
  long long p = peak_.load();
  while (now > p && !peak_.compare_exchange_weak(p, now)) {
  }
}

void MemMeter::sub(std::size_t floats) {
  current_.fetch_sub(static_cast<long long>(floats));
}

std::size_t MemMeter::current() {
  return static_cast<std::size_t>(std::max(0LL, current_.load()));
}

std::size_t MemMeter::peak() {
  return static_cast<std::size_t>(std::max(0LL, peak_.load()));
}

void PerSampleNorms::finalize() {
  const std::size_t B = group_sq.empty() ? 0 : group_sq[0].size();
  total.assign(B, 0.0);
  for (const auto& g : group_sq) {
    for (std::size_t i = 0; i < B; ++i) total[i] += g[i];
  }
  for (double& t : total) t = std::sqrt(t);
}

std::vector<double> ghost_norm_linear(const std::vector<Array>& inputs,
                                      const std::vector<Array>& out_grads) {
  if (inputs.size() != out_grads.size()) {
    throw std::invalid_argument("ghost_norm_linear: batch mismatch");
  }
  std::vector<double> sq(inputs.size(), 0.0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Array& a = inputs[i];
    const Array& g = out_grads[i];
    if (a.rank() != 2 || g.rank() != 2 || a.rows() != g.rows()) {
      throw std::invalid_argument("ghost_norm_linear: shape mismatch");
    }
    const std::size_t T = a.rows();
    // <aa^T, gg^T>; the two T x T Grams are the method's auxiliary buffers.
    MeteredFloats meter(2 * T * T);
    Array ga = Array::zeros({T, T});
    Array gg = Array::zeros({T, T});
    matmul_nt(ga.data.data(), a.data.data(), a.data.data(), T, a.cols(), T,
              false);
    matmul_nt(gg.data.data(), g.data.data(), g.data.data(), T, g.cols(), T,
              false);
    sq[i] = inner(ga, gg);
  }
  return sq;
}

std::vector<double> phantom_norm_embedding(
    const std::vector<std::vector<int>>& tokens,
    const std::vector<Array>& grad_e_s, const std::vector<Array>& grad_e_c) {
  const std::size_t B = tokens.size();
  if (grad_e_s.size() != B || (!grad_e_c.empty() && grad_e_c.size() != B)) {
    throw std::invalid_argument("phantom_norm_embedding: batch mismatch");
  }
  std::vector<double> sq(B, 0.0);

  // The batch of L x L input Grams, built from token equality.
  std::size_t gram_floats = 0;
  for (std::size_t i = 0; i < B; ++i) {
    gram_floats += tokens[i].size() * tokens[i].size();
  }
  MeteredFloats meter(gram_floats);
  std::vector<Array> grams(B);
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t L = tokens[i].size();
    grams[i] = Array::zeros({L, L});
    for (std::size_t t = 0; t < L; ++t) {
      if (tokens[i][t] == 0) continue;
      for (std::size_t u = 0; u < L; ++u) {
        if (tokens[i][t] == tokens[i][u]) grams[i].at(t, u) = 1.0;
      }
    }
  }

  for (std::size_t i = 0; i < B; ++i) {
    const Array& ges = grad_e_s[i];
    const std::size_t L = tokens[i].size();
    const std::size_t d = ges.cols();
    if (ges.rows() != L) {
      throw std::invalid_argument("phantom_norm_embedding: grad_e_s shape");
    }
    double term = 0.0;
    for (std::size_t t = 0; t < L; ++t) {
      const double* gram_row = grams[i].row(t);
      for (std::size_t u = 0; u < L; ++u) {
        if (gram_row[u] != 0.0) {
          term += dot(ges.row(t), ges.row(u), d);
        }
      }
    }
    if (!grad_e_c.empty()) {
      const Array& gec = grad_e_c[i];
      const std::size_t M = gec.rows();
      term += sum_squares(gec.data);
      for (std::size_t t = 0; t < L; ++t) {
        const int tok = tokens[i][t];
        if (tok == 0) continue;
        if (tok < 1 || static_cast<std::size_t>(tok) > M) {
          throw std::invalid_argument("phantom_norm_embedding: token range");
        }
        term += 2.0 * dot(ges.row(t), gec.row(tok - 1), d);
      }
    }
    sq[i] = term;
  }
  return sq;
}

std::vector<double> ghost_style_embedding_norms(const GradTape& tape) {
  const std::size_t B = tape.batch;
  std::vector<double> sq =
      phantom_norm_embedding(tape.tokens, tape.grad_e_s, {});
  if (tape.grad_e_c.empty()) return sq;
  for (std::size_t i = 0; i < B; ++i) {
    const Array& gec = tape.grad_e_c[i];
    const std::size_t M = gec.rows();
    // Candidate branch the generic way: a_c is the identity, so the two
    // M x M Grams are materialized and contracted.
    MeteredFloats meter(2 * M * M);
    Array gram_c = Array::zeros({M, M});
    for (std::size_t m = 0; m < M; ++m) gram_c.at(m, m) = 1.0;
    Array gg = Array::zeros({M, M});
    matmul_nt(gg.data.data(), gec.data.data(), gec.data.data(), M, gec.cols(),
              M, false);
    sq[i] += inner(gram_c, gg);
    // Cross term is unchanged.
    for (std::size_t t = 0; t < tape.tokens[i].size(); ++t) {
      const int tok = tape.tokens[i][t];
      if (tok == 0) continue;
      sq[i] += 2.0 * dot(tape.grad_e_s[i].row(t), gec.row(tok - 1), gec.cols());
    }
  }
  return sq;
}

std::vector<std::string> norm_group_order(bool share_embedding,
                                          std::size_t n_blocks) {
  std::vector<std::string> order;
  order.push_back("embedding");
  if (!share_embedding) order.push_back("out_embedding");
  auto block_name = [](std::size_t b, const char* f) {
    return "blocks[" + std::to_string(b) + "]." + f;
  };
  for (std::size_t b = 0; b < n_blocks; ++b) {
    for (const char* f : {"w_q", "w_k", "w_v", "w_o", "w1", "w2"}) {
      order.push_back(block_name(b, f));
    }
  }
  order.push_back("pos_embedding");
  for (std::size_t b = 0; b < n_blocks; ++b) {
    for (const char* f :
         {"ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias", "b1", "b2"}) {
      order.push_back(block_name(b, f));
    }
  }
  order.push_back("lnf_gain");
  order.push_back("lnf_bias");
  return order;
}

PerSampleNorms fast_per_sample_norms(const GradTape& tape) {
  if (tape.batch == 0 || tape.grad_e_s.empty()) {
    throw std::invalid_argument("fast_per_sample_norms: incomplete tape");
  }
  const std::size_t B = tape.batch;
  // Register the embedding-branch tape buffers consumed by the phantom
  // formula; together with the Grams these are the method's auxiliary memory.
  std::size_t tape_floats = 0;
  for (const auto& a : tape.grad_e_s) tape_floats += a.size();
  for (const auto& a : tape.grad_e_c) tape_floats += a.size();
  MeteredFloats meter(tape_floats);

  PerSampleNorms norms;
  norms.group_names.push_back("embedding");
  norms.group_sq.push_back(
      phantom_norm_embedding(tape.tokens, tape.grad_e_s, tape.grad_e_c));
  std::size_t n_blocks = 0;
  for (const auto& le : tape.linears) {
    if (le.inputs.size() != B || le.out_grads.size() != B) {
      throw std::invalid_argument("fast_per_sample_norms: missing tape entry");
    }
    norms.group_names.push_back(le.name);
    norms.group_sq.push_back(ghost_norm_linear(le.inputs, le.out_grads));
    if (le.name.rfind("blocks[", 0) == 0) ++n_blocks;
  }
  for (const auto& de : tape.directs) {
    if (de.per_sample_grads.size() != B) {
      throw std::invalid_argument("fast_per_sample_norms: missing tape entry");
    }
    norms.group_names.push_back(de.name);
    std::vector<double> sq(B, 0.0);
    for (std::size_t i = 0; i < B; ++i) {
      sq[i] = sum_squares(de.per_sample_grads[i].data);
    }
    norms.group_sq.push_back(std::move(sq));
  }
  norms.finalize();
  return norms;
}

NaiveNormResult naive_per_sample_norms(const ModelParams& params,
                                       const SequenceBatch& batch,
                                       const ForwardCache* mask_replay) {
  const std::size_t B = batch.sample_count;
  const std::size_t L = batch.max_len;
  NaiveNormResult res;
  res.norms.group_names =
      norm_group_order(params.config.share_embedding, params.config.n_blocks);
  res.norms.group_sq.assign(res.norms.group_names.size(),
                            std::vector<double>(B, 0.0));
  std::unordered_map<std::string, std::size_t> group_index;
  for (std::size_t gidx = 0; gidx < res.norms.group_names.size(); ++gidx) {
    group_index[res.norms.group_names[gidx]] = gidx;
  }

  for (std::size_t i = 0; i < B; ++i) {
    SequenceBatch one;
    one.sample_count = 1;
    one.max_len = L;
    one.tokens.assign(batch.tokens.begin() + i * L,
                      batch.tokens.begin() + (i + 1) * L);
    one.targets.assign(batch.targets.begin() + i * L,
                       batch.targets.begin() + (i + 1) * L);
    auto fw = forward(params, one, RunMode::kEval, nullptr, Rng(0), mask_replay,
                      /*replay_sample_offset=*/i);
    auto loss = loss_next_token(fw.logits, one);
    auto bw = backward(params, fw.cache, loss.dlogits, {}, /*build_tape=*/false);
    for (std::size_t t = 0; t < bw.grad.size(); ++t) {
      const std::string& name = bw.grad.names[t];
      const std::string group = name == "embedding" ? "embedding" : name;
      res.norms.group_sq[group_index.at(group)][i] +=
          sum_squares(bw.grad.tensors[t].data);
    }
    res.per_sample_grads.push_back(std::move(bw.grad));
  }
  res.norms.finalize();
  return res;
}

std::vector<double> clip_factors(const std::vector<double>& norms, double C,
                                 ClipMode mode) {
  if (C <= 0.0) throw std::invalid_argument("clip_factors: C <= 0");
  constexpr double kStabilizer = 1e-6;
  std::vector<double> f(norms.size());
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (norms[i] < 0.0) throw std::invalid_argument("clip_factors: norm < 0");
    if (mode == ClipMode::kClip) {
      f[i] = norms[i] > C ? C / norms[i] : 1.0;
    } else {
      f[i] = C / (norms[i] + kStabilizer);
    }
  }
  return f;
}

ClippedGradientResult clipped_batch_gradient(
    const ModelParams& params, const SequenceBatch& batch, double C,
    ClipMode mode, Rng dropout_rng, const ReattentionContext* reattention) {
  auto fw = forward(params, batch, RunMode::kTrain, reattention, dropout_rng);
  auto loss = loss_next_token(fw.logits, batch);
  auto pass1 = backward(params, fw.cache, loss.dlogits, {}, /*build_tape=*/true);
  ClippedGradientResult res;
  res.norms = fast_per_sample_norms(pass1.tape);
  res.factors = clip_factors(res.norms.total, C, mode);
  auto pass2 =
      backward(params, fw.cache, loss.dlogits, res.factors, /*build_tape=*/false);
  res.grad = std::move(pass2.grad);
  res.mean_loss = loss.mean_loss;
  return res;
}

MemoryReport aux_memory_report(std::size_t B, std::size_t L, std::size_t M,
                               std::size_t d, const std::string& method) {
  if (B == 0 || L == 0 || M == 0 || d == 0) {
    throw std::invalid_argument("aux_memory_report: zero dimension");
  }
  MemoryReport r;
  r.method = method;
  r.B = B;
  r.L = L;
  r.M = M;
  r.d = d;
  if (method == "phantom") {
    r.items = {{"gram_inputs", B * L * L},
               {"grad_e_s", B * L * d},
               {"grad_e_c", B * M * d}};
  } else if (method == "ghost") {
    r.items = {{"gram_inputs", B * L * L},
               {"gram_candidates", B * M * M},
               {"grad_e_s", B * L * d},
               {"grad_e_c", B * M * d}};
  } else if (method == "naive") {
    r.items = {{"per_sample_embedding_grads", B * M * d}};
  } else {
    throw std::invalid_argument("aux_memory_report: unknown method " + method);
  }
  for (const auto& [name, count] : r.items) r.auxiliary_float_count += count;
  return r;
}

std::string memory_report_text(const MemoryReport& r) {
  std::ostringstream os;
  os << "method: " << r.method << " (B=" << r.B << " L=" << r.L << " M=" << r.M
     << " d=" << r.d << ")\n";
  for (const auto& [name, count] : r.items) {
    os << "  " << name << ": " << count << " floats\n";
  }
  os << "  total auxiliary: " << r.auxiliary_float_count << " floats\n";
  return os.str();
}

}  // namespace dpseq

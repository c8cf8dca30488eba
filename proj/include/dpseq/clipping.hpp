#pragma once

#include <atomic>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dpseq/numkit.hpp"
#include "dpseq/seqdata.hpp"
#include "dpseq/transformer.hpp"

namespace dpseq {

// Live float-count instrumentation for the auxiliary buffers of the norm
// kernels; lets the analytic memory accounting be checked against reality.
class MemMeter {
 public:
  static void reset();
  static void add(std::size_t floats);
  static void sub(std::size_t floats);
  static std::size_t current();
  static std::size_t peak();

 private:
  static std::atomic<long long> current_;
  static std::atomic<long long> peak_;
};

// RAII registration of a buffer's float count with the meter.
class MeteredFloats {
 public:
  explicit MeteredFloats(std::size_t n) : n_(n) { MemMeter::add(n_); }
  ~MeteredFloats() { MemMeter::sub(n_); }
  MeteredFloats(const MeteredFloats&) = delete;
  MeteredFloats& operator=(const MeteredFloats&) = delete;

 private:
  std::size_t n_;
};

struct PerSampleNorms {
  std::vector<std::string> group_names;
  std::vector<std::vector<double>> group_sq;  // [group][sample], squared norms
  std::vector<double> total;                  // [sample], sqrt of group sums

  void finalize();  // fills total from group_sq
};

// <a_i a_i^T, g_i g_i^T> per sample, which equals ||a_i^T g_i||_F^2 without
// instantiating the per-sample weight gradient.
std::vector<double> ghost_norm_linear(const std::vector<Array>& inputs,
                                      const std::vector<Array>& out_grads);

// Squared per-sample gradient norm of a shared embedding from its two
// backpropagation branches:
//   <a_s a_s^T, de_s de_s^T> + ||de_c||_F^2 + 2 <de_s, gather(de_c, tokens)>,
// where the L x L Gram of the one-hot input rows is built directly from
// integer token equality (entry 0 whenever either position is padding).
// grad_e_c may be empty (unshared embedding: input branch only).
std::vector<double> phantom_norm_embedding(
    const std::vector<std::vector<int>>& tokens,
    const std::vector<Array>& grad_e_s, const std::vector<Array>& grad_e_c);

// Benchmark-only variant that evaluates the candidate branch the way a
// generic ghost pass would: materializing the M x M candidate Gram matrices.
std::vector<double> ghost_style_embedding_norms(const GradTape& tape);

// Canonical norm-group order shared by the fast path and the naive oracle.
std::vector<std::string> norm_group_order(bool share_embedding,
                                          std::size_t n_blocks);

struct NaiveNormResult {
  PerSampleNorms norms;
  std::vector<TensorSet> per_sample_grads;
};

// The oracle: B independent batch-size-1 backward passes instantiating every
// per-sample gradient. When mask_replay is given, each pass replays that
// cache's dropout masks so the oracle differentiates the same function as the
// batched pass it is checking.
NaiveNormResult naive_per_sample_norms(const ModelParams& params,
                                       const SequenceBatch& batch,
                                       const ForwardCache* mask_replay = nullptr);

// Phantom norm for the shared embedding, ghost norms for every linear layer,
// direct norms for the small parameters, combined by the Pythagorean
// decomposition.
PerSampleNorms fast_per_sample_norms(const GradTape& tape);

enum class ClipMode { kClip, kNormalize };

// kClip: min(C / n_i, 1).  kNormalize: C / (n_i + 1e-6).
std::vector<double> clip_factors(const std::vector<double>& norms, double C,
                                 ClipMode mode);

struct ClippedGradientResult {
  TensorSet grad;  // sum_i factor_i * g_i
  PerSampleNorms norms;
  std::vector<double> factors;
  double mean_loss = 0.0;
};

// Two-pass assembly: forward + tape-building backward, fast per-sample norms,
// then a second backward with per-sample weights = clip factors. The second
// pass reuses the first pass's forward cache, so both passes differentiate
// the same dropout realization.
ClippedGradientResult clipped_batch_gradient(
    const ModelParams& params, const SequenceBatch& batch, double C,
    ClipMode mode, Rng dropout_rng,
    const ReattentionContext* reattention = nullptr);

struct MemoryReport {
  std::string method;  // naive | ghost | phantom
  std::size_t B = 0, L = 0, M = 0, d = 0;
  std::vector<std::pair<std::string, std::size_t>> items;
  std::size_t auxiliary_float_count = 0;
};

// Analytic auxiliary float counts per method, itemized per buffer.
MemoryReport aux_memory_report(std::size_t B, std::size_t L, std::size_t M,
                               std::size_t d, const std::string& method);

std::string memory_report_text(const MemoryReport& r);

}  // namespace dpseq

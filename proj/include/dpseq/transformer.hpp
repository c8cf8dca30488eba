#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpseq/numkit.hpp"
#include "dpseq/reattention.hpp"
#include "dpseq/seqdata.hpp"

namespace dpseq {

enum class Activation { kRelu, kGelu };

struct ModelConfig {
  std::size_t vocab_size = 0;  // M
  std::size_t max_len = 50;    // L
  std::size_t dim = 64;        // d
  std::size_t ffn_dim = 64;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 1;
  bool share_embedding = true;
  Activation activation = Activation::kRelu;
  double dropout = 0.2;
};

struct BlockParams {
  Array ln1_gain, ln1_bias;
  Array w_q, w_k, w_v, w_o;  // d x d
  Array ln2_gain, ln2_bias;
  Array w1, b1;              // d x ffn_dim, ffn_dim
  Array w2, b2;              // ffn_dim x d, d
};

// Token ids 1..M map to embedding rows 0..M-1; id 0 (padding) embeds to the
// zero vector. With share_embedding the same matrix produces the logits
// (logits = h * E^T); otherwise out_embedding exists separately.
struct ModelParams {
  ModelConfig config;
  Array embedding;      // M x d
  Array out_embedding;  // M x d, empty when shared
  Array pos_embedding;  // L x d
  std::vector<BlockParams> blocks;
  Array lnf_gain, lnf_bias;
};

ModelParams init_params(const ModelConfig& config, Rng& rng);

struct ParamRef {
  std::string name;
  Array* tensor;
};
struct ConstParamRef {
  std::string name;
  const Array* tensor;
};
// Fixed parameter order shared by gradients, optimizer state and checkpoints.
std::vector<ParamRef> param_refs(ModelParams& params);
std::vector<ConstParamRef> param_refs(const ModelParams& params);

TensorSet zeros_like(const ModelParams& params);

enum class RunMode { kTrain, kEval };

struct BlockCache {
  Array ln1_xhat;
  std::vector<double> ln1_inv;
  Array attn_in;
  Array q, k, v;
  std::vector<Array> attn_pre;        // per head, L x L rows of softmax probs
  std::vector<Array> attn_post;       // per head, after re-attention (empty if unused)
  std::vector<Array> attn_drop_mask;  // per head, empty in eval mode
  Array attn_mixed;
  Array x1;
  Array ln2_xhat;
  std::vector<double> ln2_inv;
  Array ffn_in;
  Array h_pre, h_act;
  Array ffn_drop_mask;  // empty in eval mode
};

struct SampleCache {
  std::vector<int> tokens;
  Array x0;
  std::vector<BlockCache> blocks;
  Array lnf_xhat;
  std::vector<double> lnf_inv;
  Array final_hidden;
  std::size_t n_supervised = 0;
};

struct ForwardCache {
  RunMode mode = RunMode::kEval;
  double dropout = 0.0;
  bool reattention_renormalized = true;
  std::vector<SampleCache> samples;
};

struct ForwardResult {
  Array logits;  // B x L x M
  ForwardCache cache;
};

// Causal next-token forward pass. Padding key positions are masked out of
// every attention row; a padding query position attends only to itself.
// When `reattention` is given, each attention row is corrected before the
// value-weighting step. `mask_replay` reuses the dropout masks of a previous
// cache instead of drawing fresh ones (replay_sample selects the row when
// the replay cache is larger than this batch).
ForwardResult forward(const ModelParams& params, const SequenceBatch& batch,
                      RunMode mode,
                      const ReattentionContext* reattention = nullptr,
                      Rng dropout_rng = Rng(0),
                      const ForwardCache* mask_replay = nullptr,
                      std::size_t replay_sample_offset = 0);

struct LossResult {
  double mean_loss = 0.0;
  std::vector<double> per_sample;  // length B
  Array dlogits;  // B x L x M; slice b holds d(per-sample loss b)/d(logits b)
};

// Cross-entropy over the M-way softmax at every supervised position; each
// per-sample loss is the mean over that sample's supervised positions.
LossResult loss_next_token(const Array& logits, const SequenceBatch& batch);

struct LinearTapeEntry {
  std::string name;
  std::vector<Array> inputs;     // per sample, T x d_in
  std::vector<Array> out_grads;  // per sample, T x d_out
};

struct DirectTapeEntry {
  std::string name;
  std::vector<Array> per_sample_grads;  // per sample, parameter-shaped
};

// Per-layer records sufficient for norm-only clipping: the shared embedding's
// two branches, input/output-gradient pairs for every matmul against a weight
// matrix, and directly instantiated per-sample gradients for the small
// parameters (positional embedding, biases, layernorm gains).
struct GradTape {
  std::size_t batch = 0;
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  bool share_embedding = true;
  std::vector<std::vector<int>> tokens;  // B x L
  std::vector<Array> grad_e_s;           // B entries, L x d
  std::vector<Array> grad_e_c;           // B entries, M x d; empty if unshared
  std::vector<LinearTapeEntry> linears;
  std::vector<DirectTapeEntry> directs;
};

struct BackwardResult {
  TensorSet grad;  // sum over samples of weights[i] * per-sample gradient
  GradTape tape;
};

// Exact backprop through the cached forward. When `weights` is given, sample
// i's loss gradient is pre-multiplied by weights[i]. The tape is only
// populated when build_tape is set.
BackwardResult backward(const ModelParams& params, const ForwardCache& cache,
                        const Array& dlogits,
                        std::span<const double> weights = {},
                        bool build_tape = true);

// Central-difference validation of backward() on n_coords coordinates chosen
// round-robin across all parameter tensors; returns the max relative error.
// Runs in eval mode (dropout off, no attention correction).
double finite_difference_check(const ModelParams& params,
                               const SequenceBatch& batch, double epsilon,
                               std::size_t n_coords, Rng& rng);

// Versioned binary checkpoint; round-trips bit-exactly on the same platform.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace dpseq

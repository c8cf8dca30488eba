#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dpseq/clipping.hpp"
#include "dpseq/numkit.hpp"
#include "dpseq/privacy.hpp"
#include "dpseq/reattention.hpp"
#include "dpseq/seqdata.hpp"
#include "dpseq/transformer.hpp"

namespace dpseq {

struct TrainConfig {
  // Exactly one of epsilon / sigma_dp must be set.
  std::optional<double> epsilon;
  std::optional<double> sigma_dp;
  double delta = 0.0;  // <= 0 selects the default 1 / (10 * #users)
  std::size_t epochs = 100;
  double warmup_fraction = 0.2;
  // Exactly one of batch / q must be set.
  std::optional<std::size_t> batch;
  std::optional<double> q;
  bool uniform_sampling = false;  // benchmarking mode; Poisson is the default
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  double clip_norm = 1.0;
  ClipMode clip_mode = ClipMode::kNormalize;
  ModelConfig model;  // vocab_size/max_len are overwritten from the dataset
  bool reattention = false;
  bool reattention_renormalize = true;
  std::uint64_t seed = 0;
  std::size_t eval_every = 5;  // epochs between evaluations
  std::size_t eval_k = 10;
  bool eval_exclude_seen = false;
  std::size_t eval_sampled_negatives = 0;  // 0 = rank against all M items
};

struct EvalPoint {
  std::size_t epoch = 0;
  double ndcg = 0.0;  // percent
  double hit = 0.0;   // percent
  double epsilon_spent = 0.0;
  double train_loss = 0.0;
};

struct MetricsReport {
  std::vector<EvalPoint> history;
  double final_ndcg = 0.0;
  double final_hit = 0.0;
  double final_epsilon = 0.0;
  std::size_t steps = 0;
  bool aborted = false;
};

double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr,
                   double warmup_fraction);

struct AdamState {
  TensorSet m, v;
  long long t = 0;
};

AdamState init_adam(const ModelParams& params);

// Adam (beta1=0.9, beta2=0.999, eps=1e-8) with decoupled weight decay.
void adam_update(ModelParams& params, const TensorSet& grad, AdamState& state,
                 double lr, double weight_decay = 1e-5);

struct EvalOptions {
  std::size_t k = 10;
  bool exclude_seen = false;
  std::size_t sampled_negatives = 0;
  const EffectiveError* reattention_errors = nullptr;  // null = vanilla forward
  bool reattention_renormalize = true;
};

struct EvalResult {
  double ndcg = 0.0;  // percent
  double hit = 0.0;   // percent
};

// Full ranking of all M items by the final-position logit; ties broken by
// token id ascending. HIT@K = 100 * mean[rank <= K], NDCG@K = 100 *
// mean[rank <= K ? 1/log2(rank+1) : 0].
EvalResult evaluate(const ModelParams& params, const SequenceDataset& dataset,
                    const EvalOptions& options = {});

struct TrainResult {
  ModelParams params;
  MetricsReport report;
  PrivacyLedger ledger;
};

TrainResult train(const TrainConfig& config, const SequenceDataset& dataset);

struct GridCell {
  TrainConfig config;
  std::string label;
  bool failed = false;
  std::string error;
  double mean_ndcg = 0.0, std_ndcg = 0.0;
  double mean_hit = 0.0, std_hit = 0.0;
  std::vector<double> ndcg_runs, hit_runs;
};

// Runs each config with `replicates` seed offsets; failures are marked and
// the grid continues.
std::vector<GridCell> run_experiment_grid(const std::vector<TrainConfig>& configs,
                                          const SequenceDataset& dataset,
                                          std::size_t replicates = 1);

std::string grid_table_text(const std::vector<GridCell>& cells);

// Deterministic JSON report (no wall-clock content): config echo, dataset
// summary, privacy ledger state, metric history. Schema documented in the
// README.
std::string report_json(const TrainConfig& config, const SequenceDataset& dataset,
                        const MetricsReport& report, const PrivacyLedger& ledger);

}  // namespace dpseq

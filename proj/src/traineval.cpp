#include "dpseq/traineval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dpseq {

double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr,
                   double warmup_fraction) {
  if (total_steps == 0) return 0.0;
  if (step > total_steps) {
    throw std::invalid_argument("lr_schedule: step > total_steps");
  }
  const double warmup = warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (warmup > 0.0 && s <= warmup) return base_lr * s / warmup;
  const double span = static_cast<double>(total_steps) - warmup;
  if (span <= 0.0) return 0.0;
  return base_lr * (static_cast<double>(total_steps) - s) / span;
}

AdamState init_adam(const ModelParams& params) {
  AdamState st;
  st.m = zeros_like(params);
  st.v = zeros_like(params);
  st.t = 0;
  return st;
}

void adam_update(ModelParams& params, const TensorSet& grad, AdamState& state,
                 double lr, double weight_decay) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  auto refs = param_refs(params);
  if (refs.size() != grad.size()) {
    throw std::invalid_argument("adam_update: gradient/parameter mismatch");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.t));
  for (std::size_t r = 0; r < refs.size(); ++r) {
    Array& p = *refs[r].tensor;
    const Array& g = grad.tensors[r];
    Array& m = state.m.tensors[r];
    Array& v = state.v.tensors[r];
    if (p.size() != g.size()) {
      throw std::invalid_argument("adam_update: shape mismatch at " +
                                  refs[r].name);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m.data[i] = kBeta1 * m.data[i] + (1.0 - kBeta1) * g.data[i];
      v.data[i] = kBeta2 * v.data[i] + (1.0 - kBeta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= lr * (mhat / (std::sqrt(vhat) + kEps));
      p.data[i] -= lr * weight_decay * p.data[i];
    }
    require_finite(p, "adam_update " + refs[r].name);
  }
}

namespace {

std::size_t rank_of_target(const double* logits, std::size_t M, int target,
                           const std::vector<char>* excluded) {
  const double tv = logits[target - 1];
  std::size_t rank = 1;
  for (std::size_t m = 0; m < M; ++m) {
    if (static_cast<int>(m + 1) == target) continue;
    if (excluded && (*excluded)[m]) continue;
    if (logits[m] > tv || (logits[m] == tv && m + 1 < static_cast<std::size_t>(target))) {
      ++rank;
    }
  }
  return rank;
}

}  // namespace

EvalResult evaluate(const ModelParams& params, const SequenceDataset& dataset,
                    const EvalOptions& options) {
  const std::size_t N = dataset.num_users();
  const std::size_t M = dataset.vocab_size;
  const std::size_t L = dataset.max_len;
  if (N == 0) throw std::invalid_argument("evaluate: empty dataset");
  const std::size_t K = options.k;
  double ndcg = 0.0, hit = 0.0;
  const std::size_t chunk = 256;
  // Negative sampling (when requested) uses a fixed evaluation stream so the
  // metric is deterministic for a given dataset.
  Rng neg_rng = Rng(0x9a7e).stream(kDataStream);
  for (std::size_t start = 0; start < N; start += chunk) {
    const std::size_t end = std::min(N, start + chunk);
    std::vector<std::size_t> users(end - start);
    std::iota(users.begin(), users.end(), start);
    SequenceBatch batch = batch_from_users(dataset, users);
    ReattentionContext ctx;
    const ReattentionContext* hook = nullptr;
    if (options.reattention_errors) {
      ctx = key_variances(params, *options.reattention_errors, batch);
      ctx.renormalize = options.reattention_renormalize;
      hook = &ctx;
    }
    auto fw = forward(params, batch, RunMode::kEval, hook);
    for (std::size_t b = 0; b < users.size(); ++b) {
      const std::size_t u = users[b];
      const int target = dataset.test_targets[u];
      if (target < 1 || static_cast<std::size_t>(target) > M) continue;
      const double* row = fw.logits.data.data() + (b * L + (L - 1)) * M;
      std::vector<char> excluded;
      const std::vector<char>* excl = nullptr;
      if (options.exclude_seen) {
        excluded.assign(M, 0);
        for (int t : dataset.sequences[u]) {
          if (t >= 1) excluded[t - 1] = 1;
        }
        excluded[target - 1] = 0;
        excl = &excluded;
      }
      std::size_t rank;
      if (options.sampled_negatives > 0) {
        // Rank against `sampled_negatives` random non-target items.
        const double tv = row[target - 1];
        rank = 1;
        for (std::size_t s = 0; s < options.sampled_negatives; ++s) {
          std::size_t m;
          do {
            m = neg_rng.next_index(M);
          } while (static_cast<int>(m + 1) == target ||
                   (excl && (*excl)[m]));
          if (row[m] > tv || (row[m] == tv && m + 1 < static_cast<std::size_t>(target))) {
            ++rank;
          }
        }
      } else {
        rank = rank_of_target(row, M, target, excl);
      }
      if (rank <= K) {
        hit += 1.0;
        ndcg += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
      }
    }
  }
  EvalResult r;
  r.ndcg = 100.0 * ndcg / static_cast<double>(N);
  r.hit = 100.0 * hit / static_cast<double>(N);
  return r;
}

TrainResult train(const TrainConfig& config, const SequenceDataset& dataset) {
  if (config.epsilon.has_value() == config.sigma_dp.has_value()) {
    throw std::invalid_argument(
        "train: exactly one of epsilon / sigma_dp must be set");
  }
  if (config.batch.has_value() == config.q.has_value()) {
    throw std::invalid_argument("train: exactly one of batch / q must be set");
  }
  if (config.warmup_fraction < 0.0 || config.warmup_fraction >= 1.0) {
    throw std::invalid_argument("train: warmup_fraction not in [0,1)");
  }
  const std::size_t N = dataset.num_users();
  if (N == 0) throw std::invalid_argument("train: empty dataset");

  double q, b_nominal;
  if (config.batch) {
    b_nominal = static_cast<double>(std::min<std::size_t>(*config.batch, N));
    q = b_nominal / static_cast<double>(N);
  } else {
    q = *config.q;
    b_nominal = q * static_cast<double>(N);
  }
  const std::size_t steps_per_epoch = static_cast<std::size_t>(
      std::ceil(static_cast<double>(N) / b_nominal));
  const std::size_t total_steps = config.epochs * steps_per_epoch;

  TrainResult res;
  res.ledger.q = q;
  res.ledger.delta =
      config.delta > 0.0 ? config.delta : 1.0 / (10.0 * static_cast<double>(N));
  res.ledger.uniform_sampling_caveat = config.uniform_sampling;
  if (config.sigma_dp) {
    res.ledger.sigma_dp = *config.sigma_dp;
  } else {
    res.ledger.sigma_dp = calibrate_sigma(*config.epsilon, res.ledger.delta, q,
                                          static_cast<long long>(total_steps));
  }

  ModelConfig model_cfg = config.model;
  model_cfg.vocab_size = dataset.vocab_size;
  model_cfg.max_len = dataset.max_len;

  Rng root(config.seed);
  Rng init_rng = root.stream(kInitStream);
  Rng data_rng = root.stream(kDataStream);
  Rng noise_rng = root.stream(kNoiseStream);
  res.params = init_params(model_cfg, init_rng);

  if (config.epochs == 0 || total_steps == 0) {
    return res;  // initialized parameters, empty metric history
  }

  EffectiveError errors;
  if (config.reattention) {
    errors = effective_errors(res.ledger.sigma_dp, b_nominal,
                              dataset.frequencies);
  }
  const SamplingMode mode = config.uniform_sampling
                                ? SamplingMode::uniform(static_cast<std::size_t>(
                                      std::min<double>(b_nominal, N)))
                                : SamplingMode::poisson(q);

  AdamState adam = init_adam(res.params);
  std::size_t global_step = 0;
  double epoch_loss = 0.0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    epoch_loss = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      SequenceBatch batch = sample_minibatch(dataset, mode, data_rng);
      ReattentionContext ctx;
      const ReattentionContext* hook = nullptr;
      if (config.reattention) {
        ctx = key_variances(res.params, errors, batch);
        ctx.renormalize = config.reattention_renormalize;
        hook = &ctx;
      }
      Rng dropout_rng = root.stream(kDropoutStream, global_step);
      auto clipped = clipped_batch_gradient(res.params, batch, config.clip_norm,
                                            config.clip_mode, dropout_rng, hook);
      auto noisy = dp_step(clipped.grad, config.clip_norm, res.ledger.sigma_dp,
                           b_nominal, noise_rng);
      const double lr = lr_schedule(global_step, total_steps,
                                    config.learning_rate,
                                    config.warmup_fraction);
      adam_update(res.params, noisy, adam, lr, config.weight_decay);
      res.ledger.steps_taken += 1;
      ++global_step;
      epoch_loss += clipped.mean_loss;
    }
    epoch_loss /= static_cast<double>(steps_per_epoch);

    const bool last = epoch + 1 == config.epochs;
    if (config.eval_every > 0 &&
        ((epoch + 1) % config.eval_every == 0 || last)) {
      EvalOptions opts;
      opts.k = config.eval_k;
      opts.exclude_seen = config.eval_exclude_seen;
      opts.sampled_negatives = config.eval_sampled_negatives;
      opts.reattention_errors = config.reattention ? &errors : nullptr;
      opts.reattention_renormalize = config.reattention_renormalize;
      const EvalResult ev = evaluate(res.params, dataset, opts);
      EvalPoint pt;
      pt.epoch = epoch + 1;
      pt.ndcg = ev.ndcg;
      pt.hit = ev.hit;
      pt.epsilon_spent = rdp_epsilon(res.ledger);
      pt.train_loss = epoch_loss;
      res.report.history.push_back(pt);
      res.report.final_ndcg = ev.ndcg;
      res.report.final_hit = ev.hit;
    }
    if (config.epsilon) {
      const double spent = rdp_epsilon(res.ledger);
      if (spent > *config.epsilon * (1.0 + 1e-9)) {
        res.report.aborted = true;
        break;
      }
    }
  }
  res.report.steps = static_cast<std::size_t>(res.ledger.steps_taken);
  res.report.final_epsilon = rdp_epsilon(res.ledger);
  return res;
}

std::vector<GridCell> run_experiment_grid(const std::vector<TrainConfig>& configs,
                                          const SequenceDataset& dataset,
                                          std::size_t replicates) {
  if (configs.empty()) {
    throw std::invalid_argument("run_experiment_grid: no configs");
  }
  std::vector<GridCell> cells;
  for (const auto& base : configs) {
    GridCell cell;
    cell.config = base;
    std::ostringstream label;
    label << "B="
          << (base.batch ? std::to_string(*base.batch)
                         : "q" + std::to_string(*base.q))
          << " lr=" << base.learning_rate
          << (base.reattention ? " reattn" : "")
          << (base.model.share_embedding ? "" : " no-share");
    cell.label = label.str();
    for (std::size_t r = 0; r < replicates; ++r) {
      TrainConfig cfg = base;
      cfg.seed = base.seed + r;
      try {
        auto res = train(cfg, dataset);
        cell.ndcg_runs.push_back(res.report.final_ndcg);
        cell.hit_runs.push_back(res.report.final_hit);
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
      }
    }
    auto mean_std = [](const std::vector<double>& xs, double& mean,
                       double& sd) {
      mean = 0.0;
      sd = 0.0;
      if (xs.empty()) return;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      if (xs.size() > 1) {
        for (double x : xs) sd += (x - mean) * (x - mean);
        sd = std::sqrt(sd / static_cast<double>(xs.size() - 1));
      }
    };
    mean_std(cell.ndcg_runs, cell.mean_ndcg, cell.std_ndcg);
    mean_std(cell.hit_runs, cell.mean_hit, cell.std_hit);
    cells.push_back(std::move(cell));
  }
  return cells;
}

std::string grid_table_text(const std::vector<GridCell>& cells) {
  std::ostringstream os;
  os << "label\tndcg_mean\tndcg_std\thit_mean\thit_std\tstatus\n";
  for (const auto& c : cells) {
    os << c.label << "\t" << c.mean_ndcg << "\t" << c.std_ndcg << "\t"
       << c.mean_hit << "\t" << c.std_hit << "\t"
       << (c.failed ? ("FAILED: " + c.error) : "ok") << "\n";
  }
  return os.str();
}

std::string report_json(const TrainConfig& config, const SequenceDataset& dataset,
                        const MetricsReport& report,
                        const PrivacyLedger& ledger) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json cfg;
  if (config.epsilon) cfg["epsilon"] = *config.epsilon;
  if (config.sigma_dp) cfg["sigma_dp"] = *config.sigma_dp;
  cfg["delta"] = config.delta;
  cfg["epochs"] = config.epochs;
  cfg["warmup_fraction"] = config.warmup_fraction;
  if (config.batch) cfg["batch"] = *config.batch;
  if (config.q) cfg["q"] = *config.q;
  cfg["uniform_sampling"] = config.uniform_sampling;
  cfg["learning_rate"] = config.learning_rate;
  cfg["weight_decay"] = config.weight_decay;
  cfg["clip_norm"] = config.clip_norm;
  cfg["clip_mode"] =
      config.clip_mode == ClipMode::kClip ? "clip" : "normalize";
  cfg["dim"] = config.model.dim;
  cfg["ffn_dim"] = config.model.ffn_dim;
  cfg["n_blocks"] = config.model.n_blocks;
  cfg["n_heads"] = config.model.n_heads;
  cfg["share_embedding"] = config.model.share_embedding;
  cfg["activation"] =
      config.model.activation == Activation::kRelu ? "relu" : "gelu";
  cfg["dropout"] = config.model.dropout;
  cfg["reattention"] = config.reattention;
  cfg["reattention_renormalize"] = config.reattention_renormalize;
  cfg["seed"] = config.seed;
  cfg["eval_every"] = config.eval_every;
  cfg["eval_k"] = config.eval_k;
  j["config"] = cfg;

  const DatasetSummary s = summarize(dataset);
  j["dataset"] = {{"vocab_size", s.vocab_size},
                  {"users", s.num_users},
                  {"interactions", s.interactions},
                  {"density", s.density},
                  {"head_mass", s.head_mass},
                  {"tail_mass", s.tail_mass}};

  j["privacy"] = {{"sigma_dp", ledger.sigma_dp},
                  {"q", ledger.q},
                  {"delta", ledger.delta},
                  {"steps", ledger.steps_taken},
                  {"epsilon_spent", report.final_epsilon},
                  {"uniform_sampling_caveat", ledger.uniform_sampling_caveat}};

  nlohmann::ordered_json hist = nlohmann::ordered_json::array();
  for (const auto& pt : report.history) {
    hist.push_back({{"epoch", pt.epoch},
                    {"ndcg_at_k", pt.ndcg},
                    {"hit_at_k", pt.hit},
                    {"epsilon_spent", pt.epsilon_spent},
                    {"train_loss", pt.train_loss}});
  }
  j["history"] = hist;
  j["final"] = {{"ndcg_at_k", report.final_ndcg},
                {"hit_at_k", report.final_hit},
                {"epsilon_spent", report.final_epsilon},
                {"steps", report.steps},
                {"aborted", report.aborted}};
  return j.dump(2) + "\n";
}

}  // namespace dpseq

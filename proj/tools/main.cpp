#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpseq/clipping.hpp"
#include "dpseq/privacy.hpp"
#include "dpseq/reattention.hpp"
#include "dpseq/seqdata.hpp"
#include "dpseq/traineval.hpp"
#include "dpseq/transformer.hpp"
#include "json.hpp"

namespace {

using namespace dpseq;

LogFormat parse_format(const std::string& s) {
  if (s == "tsv") return LogFormat::kTsv;
  if (s == "movielens-dat") return LogFormat::kMovieLensDat;
  throw CLI::ValidationError("--format must be tsv or movielens-dat");
}

SequenceDataset load_dataset(const std::string& path, const std::string& format,
                             std::size_t min_count, std::size_t max_len) {
  auto log = ingest_interactions_file(path, parse_format(format));
  if (log.malformed_lines > 0) {
    std::cerr << "warning: " << log.malformed_lines << " malformed lines\n";
  }
  auto ds = build_dataset(log, min_count, max_len);
  std::cerr << summary_text(summarize(ds));
  return ds;
}

void write_text(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::cout << content;
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << content;
}

SequenceBatch random_full_batch(std::size_t B, std::size_t L, std::size_t M,
                                Rng& rng) {
  SequenceBatch batch;
  batch.sample_count = B;
  batch.max_len = L;
  batch.tokens.assign(B * L, 0);
  batch.targets.assign(B * L, 0);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t t = 0; t < L; ++t) {
      batch.tokens[i * L + t] = 1 + static_cast<int>(rng.next_index(M));
      if (t > 0) batch.targets[i * L + t - 1] = batch.tokens[i * L + t];
    }
  }
  return batch;
}

int cmd_train(const std::string& data, const std::string& format,
              TrainConfig cfg, std::size_t min_count, std::size_t max_len,
              const std::string& out, const std::string& checkpoint_out) {
  auto ds = load_dataset(data, format, min_count, max_len);
  const auto t0 = std::chrono::steady_clock::now();
  auto res = train(cfg, ds);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  write_text(out, report_json(cfg, ds, res.report, res.ledger));
  if (!checkpoint_out.empty()) save_checkpoint(res.params, checkpoint_out);
  std::cerr << "trained " << res.report.steps << " steps in " << secs
            << " s; final NDCG@" << cfg.eval_k << " = " << res.report.final_ndcg
            << "%, HIT@" << cfg.eval_k << " = " << res.report.final_hit
            << "%, epsilon = " << res.report.final_epsilon << "\n";
  return 0;
}

int cmd_eval(const std::string& data, const std::string& format,
             const std::string& checkpoint, std::size_t min_count,
             EvalOptions opts, const std::string& out) {
  auto params = load_checkpoint(checkpoint);
  auto ds = load_dataset(data, format, min_count, params.config.max_len);
  if (ds.vocab_size != params.config.vocab_size) {
    throw std::runtime_error("checkpoint vocabulary does not match dataset");
  }
  auto res = evaluate(params, ds, opts);
  nlohmann::ordered_json j;
  j["k"] = opts.k;
  j["ndcg_at_k"] = res.ndcg;
  j["hit_at_k"] = res.hit;
  write_text(out, j.dump(2) + "\n");
  return 0;
}

int cmd_accountant(double epsilon, double sigma, double delta, double q,
                   long long steps) {
  PrivacyLedger ledger;
  ledger.q = q;
  ledger.delta = delta;
  ledger.steps_taken = steps;
  nlohmann::ordered_json j;
  j["q"] = q;
  j["delta"] = delta;
  j["steps"] = steps;
  if (sigma > 0.0) {
    ledger.sigma_dp = sigma;
    double alpha = 0.0;
    const double eps = rdp_epsilon(ledger, &alpha);
    j["sigma_dp"] = sigma;
    j["epsilon"] = eps;
    j["best_order"] = alpha;
  } else {
    const double s = calibrate_sigma(epsilon, delta, q, steps);
    ledger.sigma_dp = s;
    j["epsilon_target"] = epsilon;
    j["sigma_dp"] = s;
    j["epsilon_at_sigma"] = rdp_epsilon(ledger);
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_bench_clip(std::size_t B, std::size_t L, std::size_t M, std::size_t d,
                   const std::string& method, std::size_t repeats,
                   std::uint64_t seed) {
  ModelConfig mc;
  mc.vocab_size = M;
  mc.max_len = L;
  mc.dim = d;
  mc.ffn_dim = d;
  mc.n_blocks = 2;
  mc.dropout = 0.0;
  Rng root(seed);
  Rng init_rng = root.stream(kInitStream);
  auto params = init_params(mc, init_rng);
  Rng brng = root.stream(kDataStream);
  auto batch = random_full_batch(B, L, M, brng);

  auto fw = forward(params, batch, RunMode::kEval);
  auto loss = loss_next_token(fw.logits, batch);
  auto bw = backward(params, fw.cache, loss.dlogits);

  double total_ms = 0.0;
  std::size_t peak = 0;
  for (std::size_t r = 0; r < repeats; ++r) {
    MemMeter::reset();
    const auto t0 = std::chrono::steady_clock::now();
    if (method == "phantom") {
      auto norms = fast_per_sample_norms(bw.tape);
      (void)norms;
    } else if (method == "ghost") {
      auto emb = ghost_style_embedding_norms(bw.tape);
      for (const auto& le : bw.tape.linears) {
        auto sq = ghost_norm_linear(le.inputs, le.out_grads);
        (void)sq;
      }
      (void)emb;
    } else if (method == "naive") {
      auto res = naive_per_sample_norms(params, batch);
      (void)res;
    } else {
      throw CLI::ValidationError("--method must be naive, ghost or phantom");
    }
    total_ms += std::chrono::duration<double, std::milli>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    peak = std::max(peak, MemMeter::peak());
  }
  auto report = aux_memory_report(B, L, M, d, method);
  std::cout << memory_report_text(report);
  std::cout << "measured peak (instrumented): " << peak << " floats\n";
  std::cout << "norm-phase wall time: " << total_ms / repeats
            << " ms/step over " << repeats << " repeats\n";
  return 0;
}

int cmd_distraction(std::size_t d, std::size_t L, const std::string& grid,
                    std::size_t samples, std::uint64_t seed, bool no_renorm) {
  std::vector<double> sigmas;
  std::stringstream ss(grid);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) sigmas.push_back(std::stod(tok));
  }
  if (sigmas.empty()) sigmas = {0.0, 0.1, 0.25, 0.5};
  if (L < 3) throw CLI::ValidationError("--L must be >= 3");
  if (d < 2) throw CLI::ValidationError("--d must be >= 2");

  // One fixed query with <q,q> = 2; two relevant keys and L-2 weak tail keys.
  std::vector<double> q(d, 0.0);
  q[0] = 1.0;
  q[1] = 1.0;
  Array keys = Array::zeros({L, d});
  std::vector<double> relevance(L);
  relevance[0] = 2.0;
  relevance[1] = 1.5;
  for (std::size_t i = 2; i < L; ++i) {
    relevance[i] = -1.5 - 0.5 * static_cast<double>(i - 2);
  }
  for (std::size_t i = 0; i < L; ++i) {
    keys.at(i, 0) = relevance[i] / 2.0;
    keys.at(i, 1) = relevance[i] / 2.0;
  }
  std::vector<double> logits(L);
  for (std::size_t i = 0; i < L; ++i) logits[i] = relevance[i];
  const auto noiseless = stable_softmax(logits);

  std::cout << "key\trelevance\tnoiseless";
  for (double s : sigmas) std::cout << "\tE[S](s2=" << s << ")\tcorrected";
  std::cout << "\n";
  Rng rng(seed);
  std::vector<std::vector<double>> mc_rows, fixed_rows;
  for (double s2 : sigmas) {
    std::vector<double> sig(L, 0.0);
    for (std::size_t i = 2; i < L; ++i) sig[i] = s2;  // tail keys only
    auto mc = distraction_monte_carlo(q, keys, sig, samples, rng);
    auto fixed = mc;
    reattend(fixed, q, sig, !no_renorm);
    mc_rows.push_back(mc);
    fixed_rows.push_back(fixed);
  }
  for (std::size_t i = 0; i < L; ++i) {
    std::cout << i << "\t" << relevance[i] << "\t" << noiseless[i];
    for (std::size_t g = 0; g < sigmas.size(); ++g) {
      std::cout << "\t" << mc_rows[g][i] << "\t" << fixed_rows[g][i];
    }
    std::cout << "\n";
  }
  return 0;
}

int cmd_check_grad(std::size_t M, std::size_t L, std::size_t d, std::size_t B,
                   std::size_t blocks, std::size_t heads, double eps,
                   std::size_t coords, std::uint64_t seed) {
  ModelConfig mc;
  mc.vocab_size = M;
  mc.max_len = L;
  mc.dim = d;
  mc.ffn_dim = d;
  mc.n_blocks = blocks;
  mc.n_heads = heads;
  mc.dropout = 0.0;
  Rng root(seed);
  Rng init_rng = root.stream(kInitStream);
  auto params = init_params(mc, init_rng);
  Rng brng = root.stream(kDataStream);
  auto batch = random_full_batch(B, L, M, brng);
  Rng fd_rng = root.stream(kNoiseStream);
  const double err = finite_difference_check(params, batch, eps, coords, fd_rng);
  std::cout << "max relative error over " << coords << " coordinates: " << err
            << "\n";
  std::cout << (err < 1e-4 ? "PASS" : "FAIL") << " (threshold 1e-4)\n";
  return err < 1e-4 ? 0 : 1;
}

int cmd_synth(std::size_t M, std::size_t users, double exponent,
              std::size_t min_len, std::size_t max_len, std::uint64_t seed,
              const std::string& out) {
  ZipfSynthConfig cfg;
  cfg.vocab_size = M;
  cfg.num_users = users;
  cfg.exponent = exponent;
  cfg.min_raw_len = min_len;
  cfg.max_raw_len = max_len;
  Rng rng = Rng(seed).stream(kSynthStream);
  auto log = synth_zipf_log(cfg, rng);
  std::ostringstream os;
  for (const auto& r : log.records) {
    os << r.user << "\t" << r.item << "\t" << r.timestamp << "\n";
  }
  write_text(out, os.str());
  std::cerr << "wrote " << log.records.size() << " interactions\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentially private sequential Transformer toolkit"};
  app.require_subcommand(1);

  auto* tr = app.add_subcommand("train", "Train with DP-SGD and evaluate");
  std::string data, format = "tsv", out = "report.json", checkpoint_out;
  std::size_t min_count = 5;
  TrainConfig cfg;
  double epsilon = 0.0, sigma = -1.0, q = 0.0;
  std::size_t batch = 0, max_len = 50;
  std::string clip_mode = "normalize", activation = "relu";
  std::string reattn = "off", sharing = "on";
  bool no_renorm = false, exclude_seen = false, uniform = false;
  tr->add_option("--data", data)->required();
  tr->add_option("--format", format);
  tr->add_option("--epsilon", epsilon);
  tr->add_option("--sigma", sigma);
  tr->add_option("--delta", cfg.delta);
  tr->add_option("--epochs", cfg.epochs);
  tr->add_option("--warmup", cfg.warmup_fraction);
  tr->add_option("--batch", batch);
  tr->add_option("--q", q);
  tr->add_option("--lr", cfg.learning_rate);
  tr->add_option("--weight-decay", cfg.weight_decay);
  tr->add_option("--C", cfg.clip_norm);
  tr->add_option("--clip-mode", clip_mode)
      ->check(CLI::IsMember({"clip", "normalize"}));
  tr->add_option("--max-len", max_len);
  tr->add_option("--min-count", min_count);
  tr->add_option("--dim", cfg.model.dim);
  tr->add_option("--ffn-dim", cfg.model.ffn_dim);
  tr->add_option("--blocks", cfg.model.n_blocks);
  tr->add_option("--heads", cfg.model.n_heads);
  tr->add_option("--dropout", cfg.model.dropout);
  tr->add_option("--activation", activation)
      ->check(CLI::IsMember({"relu", "gelu"}));
  tr->add_option("--reattention", reattn)->check(CLI::IsMember({"on", "off"}));
  tr->add_option("--sharing", sharing)->check(CLI::IsMember({"on", "off"}));
  tr->add_flag("--no-renorm", no_renorm);
  tr->add_flag("--uniform-sampling", uniform);
  tr->add_option("--seed", cfg.seed);
  tr->add_option("--eval-every", cfg.eval_every);
  tr->add_option("--k", cfg.eval_k);
  tr->add_flag("--exclude-seen", exclude_seen);
  tr->add_option("--sampled-negatives", cfg.eval_sampled_negatives);
  tr->add_option("--out", out);
  tr->add_option("--checkpoint-out", checkpoint_out);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string e_data, e_format = "tsv", e_ckpt, e_out = "-";
  EvalOptions e_opts;
  std::size_t e_min_count = 5;
  ev->add_option("--data", e_data)->required();
  ev->add_option("--format", e_format);
  ev->add_option("--checkpoint", e_ckpt)->required();
  ev->add_option("--k", e_opts.k);
  ev->add_flag("--exclude-seen", e_opts.exclude_seen);
  ev->add_option("--sampled-negatives", e_opts.sampled_negatives);
  ev->add_option("--min-count", e_min_count);
  ev->add_option("--out", e_out);

  auto* ac = app.add_subcommand("accountant", "RDP accountant");
  double a_eps = 0.0, a_sigma = 0.0, a_delta = 1e-5, a_q = 0.01;
  long long a_steps = 1;
  ac->add_option("--epsilon", a_eps);
  ac->add_option("--sigma", a_sigma);
  ac->add_option("--delta", a_delta);
  ac->add_option("--q", a_q);
  ac->add_option("--steps", a_steps);

  auto* bc = app.add_subcommand("bench-clip", "Per-sample norm benchmark");
  std::size_t b_B = 16, b_L = 50, b_M = 1000, b_d = 64, b_repeats = 3;
  std::string b_method = "phantom";
  std::uint64_t b_seed = 0;
  bc->add_option("--B", b_B);
  bc->add_option("--L", b_L);
  bc->add_option("--M", b_M);
  bc->add_option("--d", b_d);
  bc->add_option("--method", b_method)
      ->check(CLI::IsMember({"naive", "ghost", "phantom"}));
  bc->add_option("--repeats", b_repeats);
  bc->add_option("--seed", b_seed);

  auto* di = app.add_subcommand("distraction",
                                "Attention-distraction demonstration");
  std::size_t d_d = 8, d_L = 4, d_samples = 200000;
  std::string d_grid = "0,0.1,0.25,0.5";
  std::uint64_t d_seed = 1;
  bool d_no_renorm = false;
  di->add_option("--d", d_d);
  di->add_option("--L", d_L);
  di->add_option("--sigma-grid", d_grid);
  di->add_option("--samples", d_samples);
  di->add_option("--seed", d_seed);
  di->add_flag("--no-renorm", d_no_renorm);

  auto* cg = app.add_subcommand("check-grad", "Finite-difference check");
  std::size_t g_M = 10, g_L = 4, g_d = 8, g_B = 2, g_blocks = 2, g_heads = 1,
              g_coords = 200;
  double g_eps = 1e-5;
  std::uint64_t g_seed = 0;
  cg->add_option("--M", g_M);
  cg->add_option("--L", g_L);
  cg->add_option("--d", g_d);
  cg->add_option("--B", g_B);
  cg->add_option("--blocks", g_blocks);
  cg->add_option("--heads", g_heads);
  cg->add_option("--eps", g_eps);
  cg->add_option("--coords", g_coords);
  cg->add_option("--seed", g_seed);

  auto* sy = app.add_subcommand("synth", "Write a synthetic long-tailed TSV");
  std::size_t s_M = 200, s_users = 2000, s_min = 24, s_max = 32;
  double s_exp = 1.1;
  std::uint64_t s_seed = 0;
  std::string s_out = "synth.tsv";
  sy->add_option("--M", s_M);
  sy->add_option("--users", s_users);
  sy->add_option("--zipf", s_exp);
  sy->add_option("--min-len", s_min);
  sy->add_option("--max-len", s_max);
  sy->add_option("--seed", s_seed);
  sy->add_option("--out", s_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (tr->parsed()) {
      if (sigma >= 0.0) {
        cfg.sigma_dp = sigma;
      } else {
        cfg.epsilon = epsilon;
      }
      if (q > 0.0) {
        cfg.q = q;
      } else {
        cfg.batch = batch > 0 ? batch : 256;
      }
      cfg.clip_mode =
          clip_mode == "clip" ? ClipMode::kClip : ClipMode::kNormalize;
      cfg.model.activation =
          activation == "gelu" ? Activation::kGelu : Activation::kRelu;
      cfg.model.share_embedding = sharing == "on";
      cfg.reattention = reattn == "on";
      cfg.reattention_renormalize = !no_renorm;
      cfg.eval_exclude_seen = exclude_seen;
      cfg.uniform_sampling = uniform;
      return cmd_train(data, format, cfg, min_count, max_len, out,
                       checkpoint_out);
    }
    if (ev->parsed()) {
      return cmd_eval(e_data, e_format, e_ckpt, e_min_count, e_opts, e_out);
    }
    if (ac->parsed()) {
      return cmd_accountant(a_eps, a_sigma, a_delta, a_q, a_steps);
    }
    if (bc->parsed()) {
      return cmd_bench_clip(b_B, b_L, b_M, b_d, b_method, b_repeats, b_seed);
    }
    if (di->parsed()) {
      return cmd_distraction(d_d, d_L, d_grid, d_samples, d_seed, d_no_renorm);
    }
    if (cg->parsed()) {
      return cmd_check_grad(g_M, g_L, g_d, g_B, g_blocks, g_heads, g_eps,
                            g_coords, g_seed);
    }
    if (sy->parsed()) {
      return cmd_synth(s_M, s_users, s_exp, s_min, s_max, s_seed, s_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

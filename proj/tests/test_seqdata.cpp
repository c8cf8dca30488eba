#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "dpseq/seqdata.hpp"

using namespace dpseq;

namespace {

InteractionLog log_from_string(const std::string& s, LogFormat fmt,
                               bool strict = false) {
  std::istringstream in(s);
  return ingest_interactions(in, fmt, strict);
}

// Rebuilds an interaction log from a built dataset (training tokens followed
// by the held-out target, timestamps by position).
InteractionLog log_of_dataset(const SequenceDataset& ds) {
  InteractionLog log;
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    std::int64_t t = 0;
    for (int tok : ds.sequences[u]) {
      log.records.push_back({static_cast<std::int64_t>(u + 1), tok, ++t});
    }
    log.records.push_back(
        {static_cast<std::int64_t>(u + 1), ds.test_targets[u], ++t});
  }
  return log;
}

}  // namespace

TEST_CASE("ingest tsv and movielens formats") {
  auto tsv = log_from_string("1\t7\t100\n1\t9\t200\n", LogFormat::kTsv);
  REQUIRE(tsv.records.size() == 2);
  CHECK(tsv.records[0].user == 1);
  CHECK(tsv.records[0].item == 7);
  CHECK(tsv.records[1].item == 9);

  auto ml = log_from_string("1::1193::5::978300760\n", LogFormat::kMovieLensDat);
  REQUIRE(ml.records.size() == 1);
  CHECK(ml.records[0].user == 1);
  CHECK(ml.records[0].item == 1193);
  CHECK(ml.records[0].timestamp == 978300760);

  auto empty = log_from_string("", LogFormat::kTsv);
  CHECK(empty.records.empty());
  CHECK(empty.malformed_lines == 0);
}

TEST_CASE("ingest counts malformed lines; strict mode throws") {
  auto lax = log_from_string("1\t2\t3\nbadline\n4\t5\t6\n", LogFormat::kTsv);
  CHECK(lax.records.size() == 2);
  CHECK(lax.malformed_lines == 1);
  CHECK_THROWS(log_from_string("1\t2\t3\nbadline\n", LogFormat::kTsv, true));
}

TEST_CASE("ingest drops duplicate triples") {
  auto log = log_from_string("1\t2\t3\n1\t2\t3\n1\t2\t4\n", LogFormat::kTsv);
  CHECK(log.records.size() == 2);
}

TEST_CASE("build_dataset filtering and split") {
  // User 1: six interactions on items that each appear >= 5 times.
  // User 2: only four interactions -> discarded.
  std::ostringstream os;
  for (int t = 1; t <= 6; ++t) os << "1\t" << t % 3 + 1 << "\t" << t << "\n";
  for (int u = 3; u <= 10; ++u) {
    for (int t = 1; t <= 5; ++t) {
      os << u << "\t" << (t % 3) + 1 << "\t" << t << "\n";
    }
  }
  os << "2\t1\t1\n2\t2\t2\n2\t3\t3\n2\t1\t4\n";
  auto log = log_from_string(os.str(), LogFormat::kTsv);
  auto ds = build_dataset(log, 5, 50);
  CHECK(ds.num_users() == 9);  // user 2 dropped
  for (const auto& seq : ds.sequences) CHECK(seq.size() >= 4);
  // Split rule: the final token is held out.
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    CHECK(ds.test_targets[u] >= 1);
  }
}

TEST_CASE("user with four interactions is discarded; five retained") {
  std::ostringstream os;
  // Ten "background" users keep all items frequent; rotated orders so every
  // item also occurs in training positions.
  for (int u = 10; u < 20; ++u) {
    for (int t = 0; t < 6; ++t) {
      os << u << "\t" << ((t + u) % 6) + 1 << "\t" << t + 1 << "\n";
    }
  }
  os << "1\t1\t1\n1\t2\t2\n1\t3\t3\n1\t4\t4\n";            // 4 interactions
  os << "2\t1\t1\n2\t2\t2\n2\t3\t3\n2\t4\t4\n2\t5\t5\n";  // 5 interactions
  auto ds = build_dataset(log_from_string(os.str(), LogFormat::kTsv), 5, 50);
  CHECK(ds.num_users() == 11);
}

TEST_CASE("split keeps chronological order and truncates to most recent L") {
  std::ostringstream os;
  // One long user plus rotated background users to keep items frequent.
  for (int t = 1; t <= 10; ++t) os << "1\t" << t << "\t" << t * 10 << "\n";
  for (int u = 2; u <= 12; ++u) {
    for (int t = 0; t < 10; ++t) {
      os << u << "\t" << ((t + u) % 10) + 1 << "\t" << t + 1 << "\n";
    }
  }
  auto ds = build_dataset(log_from_string(os.str(), LogFormat::kTsv), 5, 4);
  CHECK(ds.max_len == 4);
  for (const auto& seq : ds.sequences) {
    CHECK(seq.size() <= 4);
    CHECK(seq.size() >= 1);
  }
}

TEST_CASE("build_dataset is a fixpoint of itself") {
  Rng rng(11);
  ZipfSynthConfig cfg;
  cfg.vocab_size = 40;
  cfg.num_users = 120;
  cfg.min_raw_len = 6;
  cfg.max_raw_len = 12;
  auto ds = build_dataset(synth_zipf_log(cfg, rng), 5, 10);
  auto ds2 = build_dataset(log_of_dataset(ds), 5, 10);
  REQUIRE(ds2.num_users() == ds.num_users());
  CHECK(ds2.vocab_size == ds.vocab_size);
  CHECK(ds2.sequences == ds.sequences);
  CHECK(ds2.test_targets == ds.test_targets);
}

TEST_CASE("token_frequencies counting") {
  SequenceDataset ds;
  ds.vocab_size = 2;
  ds.max_len = 10;
  ds.sequences = {{1, 1, 2}};
  ds.test_targets = {1};
  auto f = token_frequencies(ds);
  CHECK(f.total == 3);
  CHECK(f.p[0] == doctest::Approx(2.0 / 3.0));
  CHECK(f.p[1] == doctest::Approx(1.0 / 3.0));

  // Uniform corpus.
  SequenceDataset u;
  u.vocab_size = 4;
  u.max_len = 10;
  u.sequences = {{1, 2}, {3, 4}};
  u.test_targets = {1, 1};
  auto fu = token_frequencies(u);
  for (double p : fu.p) CHECK(p == doctest::Approx(0.25));

  // Degenerate: one token everywhere.
  SequenceDataset g;
  g.vocab_size = 1;
  g.max_len = 4;
  g.sequences = {{1, 1}, {1}};
  g.test_targets = {1, 1};
  CHECK(token_frequencies(g).p[0] == doctest::Approx(1.0));
}

TEST_CASE("sample_minibatch poisson and uniform") {
  SequenceDataset ds;
  ds.vocab_size = 3;
  ds.max_len = 4;
  for (int u = 0; u < 20; ++u) {
    ds.sequences.push_back({1, 2, 3});
    ds.test_targets.push_back(1);
  }
  ds.frequencies = token_frequencies(ds);

  Rng rng(3);
  auto all = sample_minibatch(ds, SamplingMode::poisson(1.0), rng);
  CHECK(all.sample_count == 20);

  auto uni = sample_minibatch(ds, SamplingMode::uniform(20), rng);
  CHECK(uni.sample_count == 20);
  std::set<std::size_t> seen(uni.user_ids.begin(), uni.user_ids.end());
  CHECK(seen.size() == 20);  // one sequence per user, no repeats

  auto small = sample_minibatch(ds, SamplingMode::uniform(5), rng);
  CHECK(small.sample_count == 5);
  std::set<std::size_t> s2(small.user_ids.begin(), small.user_ids.end());
  CHECK(s2.size() == 5);
}

TEST_CASE("poisson batch size concentrates at q*N") {
  SequenceDataset ds;
  ds.vocab_size = 1;
  ds.max_len = 2;
  const std::size_t N = 10000;
  for (std::size_t u = 0; u < N; ++u) {
    ds.sequences.push_back({1});
    ds.test_targets.push_back(1);
  }
  ds.frequencies = token_frequencies(ds);
  Rng rng(5);
  const double q = 0.01;
  const std::size_t reps = 10000;
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t r = 0; r < reps; ++r) {
    auto b = sample_minibatch(ds, SamplingMode::poisson(q), rng);
    sum += static_cast<double>(b.sample_count);
    sum_sq += static_cast<double>(b.sample_count) * b.sample_count;
  }
  const double mean = sum / reps;
  const double var = sum_sq / reps - mean * mean;
  const double se = std::sqrt(var / reps);
  CHECK(std::abs(mean - q * N) <= 3.0 * se);
}

TEST_CASE("batch layout: left padding and next-token targets") {
  SequenceDataset ds;
  ds.vocab_size = 9;
  ds.max_len = 5;
  ds.sequences = {{4, 7, 9}};
  ds.test_targets = {2};
  auto b = batch_from_users(ds, {0});
  CHECK(b.token(0, 0) == 0);
  CHECK(b.token(0, 1) == 0);
  CHECK(b.token(0, 2) == 4);
  CHECK(b.token(0, 3) == 7);
  CHECK(b.token(0, 4) == 9);
  CHECK(b.target(0, 2) == 7);
  CHECK(b.target(0, 3) == 9);
  CHECK(b.target(0, 4) == 0);  // the held-out token is not a training label
}

TEST_CASE("synthetic zipf corpus is long-tailed") {
  Rng rng(13);
  ZipfSynthConfig cfg;  // defaults: M=200, N=2000, exponent 1.1
  cfg.num_users = 800;
  auto ds = build_dataset(synth_zipf_log(cfg, rng), 5, 20);
  auto s = summarize(ds);
  // Harness threshold, not a claim: top 10% of tokens carry > 50% of mass.
  CHECK(s.head_mass > 0.5);
  CHECK(s.vocab_size > 150);
  const std::string text = summary_text(s);
  CHECK(text.find("vocab_size") != std::string::npos);
}

TEST_CASE("zipf_probs normalizes and decays") {
  auto p = zipf_probs(100, 1.1);
  double sum = 0.0;
  for (double v : p) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  for (std::size_t i = 1; i < p.size(); ++i) CHECK(p[i] <= p[i - 1]);
}

TEST_CASE("build_dataset error paths") {
  InteractionLog empty;
  CHECK_THROWS(build_dataset(empty, 5, 50));
  // Nothing survives an impossible threshold.
  auto log = log_from_string("1\t1\t1\n1\t2\t2\n", LogFormat::kTsv);
  CHECK_THROWS(build_dataset(log, 5, 50));
}

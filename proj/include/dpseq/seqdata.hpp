#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dpseq/numkit.hpp"

namespace dpseq {

struct Interaction {
  std::int64_t user = 0;
  std::int64_t item = 0;
  std::int64_t timestamp = 0;
};

struct InteractionLog {
  std::vector<Interaction> records;
  std::size_t malformed_lines = 0;
};

enum class LogFormat { kTsv, kMovieLensDat };

// Parses `user<TAB>item<TAB>timestamp` lines (kTsv) or
// `user::item::rating::timestamp` lines (kMovieLensDat, rating discarded).
// Malformed lines are counted; with strict=true any malformed line throws.
// Duplicate (user, item, timestamp) triples are dropped.
InteractionLog ingest_interactions(std::istream& source, LogFormat format,
                                   bool strict = false);
InteractionLog ingest_interactions_file(const std::string& path,
                                        LogFormat format, bool strict = false);

struct FrequencyTable {
  std::vector<double> p;       // length M, p[i] = frequency of token i+1
  std::vector<std::size_t> counts;
  std::size_t total = 0;
};

// Token ids are 1..vocab_size; 0 is reserved for padding.
struct SequenceDataset {
  std::vector<std::vector<int>> sequences;  // per-user training tokens, chronological
  std::vector<int> test_targets;            // per-user held-out final token
  std::size_t vocab_size = 0;               // M
  std::size_t max_len = 0;                  // L
  FrequencyTable frequencies;

  std::size_t num_users() const { return sequences.size(); }
};

// Iterated >=min_count filtering of users and items to a fixpoint, frequency-
// rank token remapping (rank 1 = most frequent), chronological ordering with
// ties broken by item id, truncation to the most recent L training tokens,
// and last-token test split.
SequenceDataset build_dataset(const InteractionLog& log,
                              std::size_t min_count = 5,
                              std::size_t max_len = 50);

// Frequencies over training tokens only (test targets excluded).
FrequencyTable token_frequencies(const SequenceDataset& dataset);

struct SequenceBatch {
  std::size_t sample_count = 0;  // B
  std::size_t max_len = 0;       // L
  std::vector<int> tokens;       // B x L, left-padded with 0
  std::vector<int> targets;      // B x L, next-token labels, 0 where none
  std::vector<std::size_t> user_ids;

  int token(std::size_t b, std::size_t t) const { return tokens[b * max_len + t]; }
  int target(std::size_t b, std::size_t t) const { return targets[b * max_len + t]; }
};

struct SamplingMode {
  enum Kind { kPoisson, kUniform } kind = kPoisson;
  double q = 0.0;        // Poisson inclusion probability
  std::size_t batch = 0; // uniform batch size

  static SamplingMode poisson(double q);
  static SamplingMode uniform(std::size_t batch);
};

// Poisson mode includes each user independently with probability q (an empty
// draw is resampled); uniform mode samples `batch` users without replacement.
// Each sampled user contributes exactly one sequence.
SequenceBatch sample_minibatch(const SequenceDataset& dataset,
                               const SamplingMode& mode, Rng& rng);

// Packs an explicit list of users into a batch (evaluation / oracle paths).
SequenceBatch batch_from_users(const SequenceDataset& dataset,
                               const std::vector<std::size_t>& users);

struct DatasetSummary {
  std::size_t vocab_size = 0;
  std::size_t num_users = 0;
  std::size_t interactions = 0;  // training tokens + test targets
  double density = 0.0;          // interactions / (users * vocab)
  double head_mass = 0.0;        // training-frequency share of the top 10% tokens
  double tail_mass = 0.0;
};

DatasetSummary summarize(const SequenceDataset& dataset);
std::string summary_text(const DatasetSummary& s);

struct ZipfSynthConfig {
  std::size_t vocab_size = 200;
  std::size_t num_users = 2000;
  double exponent = 1.1;
  std::size_t min_raw_len = 24;
  std::size_t max_raw_len = 32;
  // Fraction of head tokens (by rank) that carry the predictable signal; the
  // rest of the vocabulary is emitted as i.i.d. tail noise.
  double head_fraction = 0.1;
  // Probability that a position emits the signal chain instead of tail noise.
  // <0 means "use the Zipf head mass" so the marginal stays Zipf-shaped.
  double signal_prob = -1.0;
};

// Synthetic long-tailed corpus: token marginals follow Zipf(exponent); head
// tokens additionally follow a hidden successor cycle so the next token is
// predictable from the most recent head token, while tail tokens are noise.
InteractionLog synth_zipf_log(const ZipfSynthConfig& config, Rng& rng);

// Zipf(exponent) probabilities over ranks 1..n.
std::vector<double> zipf_probs(std::size_t n, double exponent);

}  // namespace dpseq

#include "dpseq/seqdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace dpseq {

namespace {

bool parse_i64(std::string_view s, std::int64_t& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

bool split(std::string_view line, std::string_view sep,
           std::vector<std::string_view>& out) {
  out.clear();
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = line.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(line.substr(pos));
      return true;
    }
    out.push_back(line.substr(pos, next - pos));
    pos = next + sep.size();
  }
}

}  // namespace

InteractionLog ingest_interactions(std::istream& source, LogFormat format,
                                   bool strict) {
  if (!source.good() && !source.eof()) {
    throw std::runtime_error("ingest_interactions: unreadable source");
  }
  InteractionLog log;
  std::string line;
  std::vector<std::string_view> fields;
  std::set<std::tuple<std::int64_t, std::int64_t, std::int64_t>> seen;
  while (std::getline(source, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    Interaction rec;
    bool ok = false;
    if (format == LogFormat::kTsv) {
      ok = split(line, "\t", fields) && fields.size() == 3 &&
           parse_i64(fields[0], rec.user) && parse_i64(fields[1], rec.item) &&
           parse_i64(fields[2], rec.timestamp);
    } else {
      ok = split(line, "::", fields) && fields.size() == 4 &&
           parse_i64(fields[0], rec.user) && parse_i64(fields[1], rec.item) &&
           parse_i64(fields[3], rec.timestamp);
    }
    if (!ok) {
      ++log.malformed_lines;
      if (strict) {
        throw std::runtime_error("ingest_interactions: malformed line: " + line);
      }
      continue;
    }
    if (seen.insert({rec.user, rec.item, rec.timestamp}).second) {
      log.records.push_back(rec);
    }
  }
  return log;
}

InteractionLog ingest_interactions_file(const std::string& path,
                                        LogFormat format, bool strict) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return ingest_interactions(in, format, strict);
}

SequenceDataset build_dataset(const InteractionLog& log, std::size_t min_count,
                              std::size_t max_len) {
  if (log.records.empty()) {
    throw std::invalid_argument("build_dataset: empty interaction log");
  }
  if (max_len < 2) throw std::invalid_argument("build_dataset: max_len < 2");

  // Chronological per-user sequences, ties broken by item id.
  std::map<std::int64_t, std::vector<Interaction>> by_user;
  for (const auto& r : log.records) by_user[r.user].push_back(r);
  for (auto& [user, recs] : by_user) {
    std::sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) {
      if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
      return a.item < b.item;
    });
  }

  // Iterated filtering to a fixpoint on the final windowed data: dropping
  // items can push users below the threshold and vice versa, truncation
  // lowers item counts, and items left with zero training occurrences (every
  // occurrence a held-out final token) are dropped so the frequency table
  // stays strictly positive. Each pass only shrinks the data, so this
  // terminates; rebuilding a built dataset is then the identity.
  bool changed = true;
  while (changed) {
    changed = false;
    // (a) >= min_count occurrences per item, >= min_count interactions
    // per user.
    std::map<std::int64_t, std::size_t> item_count;
    for (const auto& [user, recs] : by_user) {
      for (const auto& r : recs) ++item_count[r.item];
    }
    for (auto it = by_user.begin(); it != by_user.end();) {
      auto& recs = it->second;
      const std::size_t before = recs.size();
      recs.erase(std::remove_if(recs.begin(), recs.end(),
                                [&](const Interaction& r) {
                                  return item_count.at(r.item) < min_count;
                                }),
                 recs.end());
      if (recs.size() != before) changed = true;
      if (recs.size() < min_count) {
        it = by_user.erase(it);
        changed = true;
      } else {
        ++it;
      }
    }
    if (by_user.empty()) {
      throw std::runtime_error("build_dataset: no user survives filtering");
    }
    // (b) keep only the most recent L training tokens plus the test token.
    for (auto& [user, recs] : by_user) {
      if (recs.size() > max_len + 1) {
        recs.erase(recs.begin(),
                   recs.end() - static_cast<long>(max_len + 1));
        changed = true;
      }
    }
    // (c) drop items that never occur in a training position.
    std::map<std::int64_t, std::size_t> train_count;
    for (const auto& [user, recs] : by_user) {
      for (std::size_t i = 0; i + 1 < recs.size(); ++i) {
        ++train_count[recs[i].item];
      }
    }
    for (auto it = by_user.begin(); it != by_user.end();) {
      auto& recs = it->second;
      const std::size_t before = recs.size();
      recs.erase(std::remove_if(recs.begin(), recs.end(),
                                [&](const Interaction& r) {
                                  auto f = train_count.find(r.item);
                                  return f == train_count.end() ||
                                         f->second == 0;
                                }),
                 recs.end());
      if (recs.size() != before) changed = true;
      if (recs.empty()) {
        it = by_user.erase(it);
      } else {
        ++it;
      }
    }
    if (by_user.empty()) {
      throw std::runtime_error("build_dataset: no user survives filtering");
    }
  }

  // Frequency-rank token remapping over training occurrences
  // (rank 1 = most frequent; ties by original item id).
  std::map<std::int64_t, std::size_t> train_count;
  for (const auto& [user, recs] : by_user) {
    for (std::size_t i = 0; i + 1 < recs.size(); ++i) ++train_count[recs[i].item];
  }
  std::vector<std::pair<std::int64_t, std::size_t>> ranked(train_count.begin(),
                                                           train_count.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::unordered_map<std::int64_t, int> token_of;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    token_of[ranked[r].first] = static_cast<int>(r + 1);
  }

  SequenceDataset ds;
  ds.vocab_size = ranked.size();
  ds.max_len = max_len;
  for (const auto& [user, recs] : by_user) {
    std::vector<int> toks;
    toks.reserve(recs.size());
    for (const auto& r : recs) toks.push_back(token_of.at(r.item));
    const int target = toks.back();
    toks.pop_back();
    if (toks.size() > max_len) {
      toks.erase(toks.begin(), toks.end() - static_cast<long>(max_len));
    }
    ds.sequences.push_back(std::move(toks));
    ds.test_targets.push_back(target);
  }
  ds.frequencies = token_frequencies(ds);
  return ds;
}

FrequencyTable token_frequencies(const SequenceDataset& dataset) {
  FrequencyTable f;
  f.counts.assign(dataset.vocab_size, 0);
  for (const auto& seq : dataset.sequences) {
    for (int t : seq) {
      if (t < 1 || static_cast<std::size_t>(t) > dataset.vocab_size) {
        throw std::invalid_argument("token_frequencies: token out of range");
      }
      ++f.counts[t - 1];
      ++f.total;
    }
  }
  f.p.resize(dataset.vocab_size);
  for (std::size_t i = 0; i < dataset.vocab_size; ++i) {
    f.p[i] = f.total ? static_cast<double>(f.counts[i]) / f.total : 0.0;
  }
  return f;
}

SamplingMode SamplingMode::poisson(double q) {
  if (q <= 0.0 || q > 1.0) {
    throw std::invalid_argument("SamplingMode::poisson: q not in (0,1]");
  }
  SamplingMode m;
  m.kind = kPoisson;
  m.q = q;
  return m;
}

SamplingMode SamplingMode::uniform(std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("SamplingMode::uniform: B == 0");
  SamplingMode m;
  m.kind = kUniform;
  m.batch = batch;
  return m;
}

SequenceBatch batch_from_users(const SequenceDataset& dataset,
                               const std::vector<std::size_t>& users) {
  const std::size_t L = dataset.max_len;
  SequenceBatch batch;
  batch.sample_count = users.size();
  batch.max_len = L;
  batch.user_ids = users;
  batch.tokens.assign(users.size() * L, 0);
  batch.targets.assign(users.size() * L, 0);
  for (std::size_t b = 0; b < users.size(); ++b) {
    const auto& seq = dataset.sequences.at(users[b]);
    const std::size_t n = std::min(seq.size(), L);
    const std::size_t off = L - n;
    const std::size_t start = seq.size() - n;
    for (std::size_t i = 0; i < n; ++i) {
      batch.tokens[b * L + off + i] = seq[start + i];
      if (i + 1 < n) batch.targets[b * L + off + i] = seq[start + i + 1];
    }
  }
  return batch;
}

SequenceBatch sample_minibatch(const SequenceDataset& dataset,
                               const SamplingMode& mode, Rng& rng) {
  const std::size_t n_users = dataset.num_users();
  std::vector<std::size_t> picked;
  if (mode.kind == SamplingMode::kPoisson) {
    if (mode.q <= 0.0 || mode.q > 1.0) {
      throw std::invalid_argument("sample_minibatch: q not in (0,1]");
    }
    while (picked.empty()) {
      for (std::size_t u = 0; u < n_users; ++u) {
        if (rng.next_double() < mode.q) picked.push_back(u);
      }
    }
  } else {
    if (mode.batch > n_users) {
      throw std::invalid_argument("sample_minibatch: B exceeds user count");
    }
    std::vector<std::size_t> pool(n_users);
    for (std::size_t u = 0; u < n_users; ++u) pool[u] = u;
    for (std::size_t i = 0; i < mode.batch; ++i) {
      const std::size_t j = i + rng.next_index(n_users - i);
      std::swap(pool[i], pool[j]);
    }
    picked.assign(pool.begin(), pool.begin() + mode.batch);
  }
  return batch_from_users(dataset, picked);
}

DatasetSummary summarize(const SequenceDataset& dataset) {
  DatasetSummary s;
  s.vocab_size = dataset.vocab_size;
  s.num_users = dataset.num_users();
  s.interactions = dataset.frequencies.total + dataset.test_targets.size();
  if (s.num_users && s.vocab_size) {
    s.density = static_cast<double>(s.interactions) /
                (static_cast<double>(s.num_users) * s.vocab_size);
  }
  // Tokens are rank-ordered by training frequency, so the head is a prefix.
  const std::size_t head = std::max<std::size_t>(1, dataset.vocab_size / 10);
  double head_mass = 0.0;
  for (std::size_t i = 0; i < head && i < dataset.frequencies.p.size(); ++i) {
    head_mass += dataset.frequencies.p[i];
  }
  s.head_mass = head_mass;
  s.tail_mass = 1.0 - head_mass;
  return s;
}

std::string summary_text(const DatasetSummary& s) {
  std::ostringstream os;
  os << "vocab_size: " << s.vocab_size << "\n"
     << "users: " << s.num_users << "\n"
     << "interactions: " << s.interactions << "\n"
     << "density: " << s.density << "\n"
     << "head_mass(top 10% tokens): " << s.head_mass << "\n"
     << "tail_mass: " << s.tail_mass << "\n";
  return os.str();
}

std::vector<double> zipf_probs(std::size_t n, double exponent) {
  std::vector<double> p(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::pow(static_cast<double>(i + 1), -exponent);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

namespace {

std::size_t draw_categorical(const std::vector<double>& cumulative, Rng& rng) {
  const double u = rng.next_double();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  const std::size_t i = static_cast<std::size_t>(it - cumulative.begin());
  return std::min(i, cumulative.size() - 1);
}

std::vector<double> cumsum(const std::vector<double>& p) {
  std::vector<double> c(p.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    s += p[i];
    c[i] = s;
  }
  return c;
}

}  // namespace

InteractionLog synth_zipf_log(const ZipfSynthConfig& cfg, Rng& rng) {
  const std::size_t M = cfg.vocab_size;
  const std::vector<double> probs = zipf_probs(M, cfg.exponent);
  const std::size_t n_head =
      std::max<std::size_t>(2, static_cast<std::size_t>(cfg.head_fraction * M));
  double head_mass = 0.0;
  for (std::size_t i = 0; i < n_head; ++i) head_mass += probs[i];
  const double signal_prob =
      cfg.signal_prob >= 0.0 ? cfg.signal_prob : head_mass;

  // Hidden successor cycle over the head tokens (dataset-level structure,
  // drawn once).
  std::vector<std::size_t> order(n_head);
  for (std::size_t i = 0; i < n_head; ++i) order[i] = i;
  for (std::size_t i = 0; i + 1 < n_head; ++i) {
    const std::size_t j = i + rng.next_index(n_head - i);
    std::swap(order[i], order[j]);
  }
  std::vector<std::size_t> successor(n_head);
  for (std::size_t i = 0; i < n_head; ++i) {
    successor[order[i]] = order[(i + 1) % n_head];
  }

  std::vector<double> head_probs(probs.begin(), probs.begin() + n_head);
  for (double& v : head_probs) v /= head_mass;
  std::vector<double> tail_probs(probs.begin() + n_head, probs.end());
  const double tail_mass = 1.0 - head_mass;
  for (double& v : tail_probs) v /= tail_mass;
  const auto head_cum = cumsum(head_probs);
  const auto tail_cum = cumsum(tail_probs);

  InteractionLog log;
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    const std::size_t len =
        cfg.min_raw_len + rng.next_index(cfg.max_raw_len - cfg.min_raw_len + 1);
    std::size_t state = draw_categorical(head_cum, rng);
    for (std::size_t t = 0; t < len; ++t) {
      std::size_t item;
      if (rng.next_double() < signal_prob) {
        item = state;
        state = successor[state];
      } else {
        item = n_head + draw_categorical(tail_cum, rng);
      }
      log.records.push_back({static_cast<std::int64_t>(u + 1),
                             static_cast<std::int64_t>(item + 1),
                             static_cast<std::int64_t>(t + 1)});
    }
  }
  return log;
}

}  // namespace dpseq

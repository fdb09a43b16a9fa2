// SPDX-License-Identifier: Apache-2.0
#include "decap/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <sstream>

#include <json.hpp>

#include "decap/error.hpp"
#include "decap/rng.hpp"
#include "decap/strategies.hpp"
#include "decap/toy.hpp"

namespace decap {
namespace {

template <typename T>
double exact_match_impl(std::span<const T> hyp, std::span<const T> ref) {
  if (hyp.size() != ref.size()) {
    throw Error(ErrorCode::kLengthMismatch, std::to_string(hyp.size()) + " vs " + std::to_string(ref.size()));
  }
  if (hyp.empty()) throw Error(ErrorCode::kEmptyInput, "no sequences to compare");
  std::size_t same = 0;
  for (std::size_t i = 0; i < hyp.size(); ++i) same += hyp[i] == ref[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(hyp.size());
}

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Tokens& t, std::size_t n) {
  NgramCounts c;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++c[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return c;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

double exact_match_rate(std::span<const std::vector<int>> hypotheses, std::span<const std::vector<int>> references) {
  return exact_match_impl(hypotheses, references);
}

double exact_match_rate(std::span<const std::string> hypotheses, std::span<const std::string> references) {
  return exact_match_impl(hypotheses, references);
}

void BleuStats::add(const Tokens& hypothesis, std::span<const Tokens> references) {
  if (hypothesis.empty()) throw Error(ErrorCode::kEmptyHypothesis, "BLEU of an empty hypothesis");
  if (references.empty()) throw Error(ErrorCode::kEmptyInput, "BLEU needs at least one reference");
  const std::size_t c = hypothesis.size();
  hypothesis_length += c;

  // Closest reference length; the shorter one wins ties.
  std::size_t best = references.front().size();
  for (const auto& r : references) {
    const auto dr = r.size() > c ? r.size() - c : c - r.size();
    const auto db = best > c ? best - c : c - best;
    if (dr < db || (dr == db && r.size() < best)) best = r.size();
  }
  reference_length += best;

  for (std::size_t n = 1; n <= matches.size(); ++n) {
    const auto hyp = ngrams(hypothesis, n);
    NgramCounts max_ref;
    for (const auto& r : references) {
      for (const auto& [g, cnt] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], cnt);
    }
    for (const auto& [g, cnt] : hyp) {
      auto it = max_ref.find(g);
      matches[n - 1] += std::min(cnt, it == max_ref.end() ? std::size_t{0} : it->second);
      totals[n - 1] += cnt;
    }
  }
}

double BleuStats::score() const {
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < matches.size(); ++n) {
    if (totals[n] == 0) continue;
    if (matches[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
    ++orders;
  }
  if (orders == 0) return 0.0;
  const double c = static_cast<double>(hypothesis_length);
  const double r = static_cast<double>(reference_length);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(orders));
}

double bleu(const Tokens& hypothesis, std::span<const Tokens> references, std::size_t max_n) {
  if (max_n < 1) throw Error(ErrorCode::kInvalidArgument, "max_n must be >= 1");
  BleuStats s(max_n);
  s.add(hypothesis, references);
  return s.score();
}

double corpus_bleu(std::span<const Tokens> hypotheses, std::span<const std::vector<Tokens>> references,
                   std::size_t max_n) {
  if (max_n < 1) throw Error(ErrorCode::kInvalidArgument, "max_n must be >= 1");
  if (hypotheses.size() != references.size()) throw Error(ErrorCode::kLengthMismatch, "hypotheses vs references");
  BleuStats s(max_n);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) s.add(hypotheses[i], references[i]);
  return s.score();
}

double recall_at_k(const SupportMemory& memory, std::span<const std::pair<Embedding, std::size_t>> queries,
                   std::size_t k, unsigned threads) {
  if (k < 1 || k > memory.size()) throw Error(ErrorCode::kKOutOfRange, "k = " + std::to_string(k));
  if (queries.empty()) throw Error(ErrorCode::kEmptyInput, "no queries");
  std::size_t hits = 0;
  for (const auto& [q, gold] : queries) {
    if (gold >= memory.size()) throw Error(ErrorCode::kInvalidArgument, "gold index out of range");
    const auto top = retrieve_cliprre(q, memory, k, threads);
    hits += std::any_of(top.begin(), top.end(), [&](const Retrieved& r) { return r.index == gold; }) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

SupportMemory random_memory(std::size_t count, std::size_t dim, std::uint64_t seed) {
  SupportMemory m(dim);
  m.reserve(count);
  Rng rng(seed);
  std::vector<double> v(dim);
  for (std::size_t i = 0; i < count; ++i) {
    for (double& x : v) x = 2.0 * rng.uniform() - 1.0;
    auto n = normalize(v);
    m.add(n.embedding, n.prenorm, {});
  }
  return m;
}

std::vector<TimingReport> benchmark_pipeline(const BenchConfig& config, const DecoderModel& decoder) {
  if (decoder.shape().prefix_dim != config.dim) {
    throw Error(ErrorCode::kDimensionMismatch, "decoder prefix dim differs from benchmark dim");
  }
  if (config.trials == 0) throw Error(ErrorCode::kInvalidArgument, "trials must be >= 1");
  const ToyWorld world(config.dim, config.seed);
  const ToyImageEncoder images(world, GapSpec{0.5, 0.3, 0.05, config.seed});
  const auto captions = world.captions(true);
  const ProjectionConfig pc{config.temperature, true};

  std::vector<TimingReport> out;
  for (std::size_t size : config.memory_sizes) {
    if (size == 0) throw Error(ErrorCode::kInvalidArgument, "memory sizes must be >= 1");
    const SupportMemory memory = random_memory(size, config.dim, mix_seed(config.seed, size));
    std::vector<double> enc, proj, dec, tot;
    for (std::size_t trial = 0; trial <= config.trials; ++trial) {
      const auto& text = captions[trial % captions.size()];
      const auto t0 = std::chrono::steady_clock::now();
      const Embedding query = images.encode(text).embedding;
      const double e = ms_since(t0);
      const auto t1 = std::chrono::steady_clock::now();
      const Embedding prefix = project(query, memory, pc, config.threads).projected;
      const double p = ms_since(t1);
      const auto t2 = std::chrono::steady_clock::now();
      const auto tokens = decode_greedy(decoder, prefix);
      const double d = ms_since(t2);
      const double t = ms_since(t0);
      if (trial == 0) continue;  // warmup
      enc.push_back(e);
      proj.push_back(p);
      dec.push_back(d);
      tot.push_back(t);
    }
    out.push_back({size, config.dim, config.threads, config.trials, median(enc), median(proj), median(dec),
                   median(tot)});
  }
  return out;
}

std::string to_key_value(const TimingReport& r) {
  std::ostringstream s;
  s << "memory_size=" << r.memory_size << " dim=" << r.dim << " threads=" << r.threads << " trials=" << r.trials
    << " encode_ms=" << r.encode_ms << " project_ms=" << r.project_ms << " decode_ms=" << r.decode_ms
    << " total_ms=" << r.total_ms;
  return s.str();
}

std::string to_json(std::span<const TimingReport> reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    arr.push_back({{"memory_size", r.memory_size},
                   {"dim", r.dim},
                   {"threads", r.threads},
                   {"trials", r.trials},
                   {"encode_ms", r.encode_ms},
                   {"project_ms", r.project_ms},
                   {"decode_ms", r.decode_ms},
                   {"total_ms", r.total_ms}});
  }
  return nlohmann::json{{"timings", arr}}.dump(2);
}

}  // namespace decap

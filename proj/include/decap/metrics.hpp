// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "decap/decoder.hpp"
#include "decap/embedding.hpp"
#include "decap/memory.hpp"

namespace decap {

using Tokens = std::vector<std::string>;

/// Fraction of positions whose sequences are identical.
/// Throws LengthMismatch, EmptyInput.
double exact_match_rate(std::span<const std::vector<int>> hypotheses, std::span<const std::vector<int>> references);
double exact_match_rate(std::span<const std::string> hypotheses, std::span<const std::string> references);

/// Clipped n-gram counts accumulated over a corpus.
struct BleuStats {
  std::vector<std::size_t> matches;  // per order 1..max_n
  std::vector<std::size_t> totals;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;  // closest reference length, summed

  explicit BleuStats(std::size_t max_n = 4) : matches(max_n, 0), totals(max_n, 0) {}

  /// Throws EmptyHypothesis, EmptyInput (no references).
  void add(const Tokens& hypothesis, std::span<const Tokens> references);
  /// Geometric mean of modified precisions times the brevity penalty. Orders
  /// for which the hypothesis has no n-grams are left out of the mean.
  double score() const;
};

/// Sentence BLEU@max_n against any number of references.
double bleu(const Tokens& hypothesis, std::span<const Tokens> references, std::size_t max_n = 4);
/// Corpus BLEU: counts pooled over all sentences before combining.
double corpus_bleu(std::span<const Tokens> hypotheses, std::span<const std::vector<Tokens>> references,
                   std::size_t max_n = 4);

/// Fraction of queries whose gold index is among the top-k retrieved rows.
/// Throws KOutOfRange.
double recall_at_k(const SupportMemory& memory, std::span<const std::pair<Embedding, std::size_t>> queries,
                   std::size_t k, unsigned threads = 1);

struct TimingReport {
  std::size_t memory_size = 0;
  std::size_t dim = 0;
  unsigned threads = 1;
  std::size_t trials = 0;
  double encode_ms = 0.0;  // medians over trials
  double project_ms = 0.0;
  double decode_ms = 0.0;
  double total_ms = 0.0;
};

struct BenchConfig {
  std::vector<std::size_t> memory_sizes{1000, 10000, 100000};
  std::size_t dim = kDefaultDim;
  std::size_t trials = 5;
  unsigned threads = 1;
  std::uint64_t seed = 0;
  double temperature = kImageTemperature;
};

/// Per-stage wall clock (toy image encoding, projection, greedy decoding)
/// for each memory size, one warmup run then the median of `trials`.
/// The decoder's prefix dim must equal `config.dim`.
std::vector<TimingReport> benchmark_pipeline(const BenchConfig& config, const DecoderModel& decoder);

/// `count` uniformly random unit rows; used by the benchmarks.
SupportMemory random_memory(std::size_t count, std::size_t dim, std::uint64_t seed);

/// One `key=value` line per field, space separated.
std::string to_key_value(const TimingReport& r);
std::string to_json(std::span<const TimingReport> reports);

}  // namespace decap

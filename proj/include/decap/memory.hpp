// SPDX-License-Identifier: Apache-2.0
//
// Support memory: the stored set of text embeddings that represents the text
// embedding space at inference time. Building, corpus filtering, similarity
// compaction, sampling and persistence live here.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "decap/embedding.hpp"

namespace decap {

struct CorpusEntry {
  std::string text;
  std::vector<int> tokens;  // filled by Vocab::encode when a decoder is involved
  std::size_t length = 0;   // whitespace word count
};

/// Builds an entry from text; throws InvalidArgument for blank text.
CorpusEntry make_entry(std::string text);
std::vector<CorpusEntry> make_corpus(const std::vector<std::string>& texts);
std::vector<std::string> split_words(std::string_view text);

/// Frozen text encoder. Implementations return the pre-normalization output.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::size_t dim() const = 0;
  virtual RawEmbedding encode(std::string_view text) const = 0;
};

/// Encoder backed by precomputed embeddings (e.g. loaded from JSONL).
class PrecomputedEncoder final : public TextEncoder {
 public:
  explicit PrecomputedEncoder(std::size_t dim) : dim_(dim) {}

  void insert(std::string text, std::vector<double> raw);
  std::size_t dim() const override { return dim_; }
  RawEmbedding encode(std::string_view text) const override;

 private:
  std::size_t dim_;
  std::unordered_map<std::string, std::vector<double>> table_;
};

class SupportMemory {
 public:
  SupportMemory() = default;
  explicit SupportMemory(std::size_t dim);

  void add(const Embedding& embedding, double prenorm, std::string text);
  /// Appends an f32 row as-is; the row must be unit norm within 1e-5.
  void add_row(std::span<const float> row, double prenorm, std::string text);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return texts_.size(); }
  bool empty() const noexcept { return texts_.empty(); }

  std::span<const float> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  Embedding embedding(std::size_t i) const { return Embedding::from_unit(row(i)); }
  float prenorm(std::size_t i) const { return prenorms_[i]; }
  const std::string& text(std::size_t i) const { return texts_[i]; }
  MatrixView view() const noexcept { return {data_.data(), size(), dim_}; }

  const std::vector<float>& data() const noexcept { return data_; }
  const std::vector<float>& prenorms() const noexcept { return prenorms_; }
  const std::vector<std::string>& texts() const noexcept { return texts_; }

  /// Entries at `indices`, in the order given.
  SupportMemory subset(std::span<const std::size_t> indices) const;
  void reserve(std::size_t n);

  /// Bitwise equality of embeddings and prenorms, byte equality of texts.
  friend bool operator==(const SupportMemory& a, const SupportMemory& b);

 private:
  std::size_t dim_ = 0;
  std::vector<float> data_;
  std::vector<float> prenorms_;
  std::vector<std::string> texts_;
};

/// Encodes every entry in corpus order. Throws EmptyCorpus, EncoderFailure.
SupportMemory build_memory(std::span<const CorpusEntry> corpus, const TextEncoder& encoder);

/// Keeps entries with length < max_len and encoder prenorm < max_prenorm.
std::vector<CorpusEntry> filter_by_norm_and_length(std::span<const CorpusEntry> corpus,
                                                   const TextEncoder& encoder,
                                                   std::size_t max_len, double max_prenorm);

/// Same filter applied to an already-built memory using the stored prenorms.
SupportMemory filter_memory_by_norm_and_length(const SupportMemory& memory, std::size_t max_len,
                                               double max_prenorm);

struct FilterReport {
  std::size_t input_count = 0;
  std::size_t retained_count = 0;
  double threshold = 1.0;
  std::vector<std::size_t> retained;               // input indices, ascending
  std::map<std::size_t, std::size_t> removed_cover;  // removed index -> retained witness
};

/// Greedy single pass in entry order: an entry is kept iff its cosine to
/// every previously kept entry is <= threshold. The witness recorded for a
/// removed entry is the first kept entry whose cosine exceeds the threshold.
std::pair<SupportMemory, FilterReport> compact_by_similarity(const SupportMemory& memory,
                                                             double threshold);

/// ceil(fraction * N) entries drawn uniformly without replacement; kept in
/// memory order. Deterministic for a given seed.
SupportMemory sample_memory(const SupportMemory& memory, double fraction, std::uint64_t seed);

// DCAP binary format, little-endian:
//   "DCAP" | u16 version=1 | u16 flags=0 | u32 dim | u64 count
//   count*dim f32 embeddings (row-major) | count f32 prenorms
//   per entry: u32 byte length + UTF-8 text
inline constexpr std::uint16_t kMemoryFormatVersion = 1;

/// Writes to a temporary sibling and renames, so failures leave no partial file.
void save_memory(const SupportMemory& memory, const std::filesystem::path& path);
/// Throws Io, BadMagic, VersionUnsupported, Truncated, CorruptData, DimensionMismatch.
SupportMemory load_memory(const std::filesystem::path& path,
                          std::optional<std::size_t> expected_dim = std::nullopt);
SupportMemory decode_memory(std::span<const std::uint8_t> bytes,
                            std::optional<std::size_t> expected_dim = std::nullopt);
std::vector<std::uint8_t> encode_memory(const SupportMemory& memory);

/// One line of the JSONL interchange format. `embedding` is pre-normalization.
struct JsonlRecord {
  std::string text;
  std::optional<std::vector<double>> embedding;
  std::optional<double> prenorm;
};

std::vector<JsonlRecord> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::vector<JsonlRecord>& records, const std::filesystem::path& path);

/// Memory from JSONL records that carry embeddings; prenorm is recomputed when
/// absent. Throws CorruptData when a record lacks an embedding.
SupportMemory memory_from_jsonl(const std::vector<JsonlRecord>& records);

/// Loads either format, sniffing the DCAP magic.
SupportMemory load_embeddings(const std::filesystem::path& path,
                              std::optional<std::size_t> expected_dim = std::nullopt);

/// Projection over a whole support memory.
inline ProjectionResult project(const Embedding& query, const SupportMemory& memory,
                                const ProjectionConfig& config, unsigned threads = 1) {
  return project(query, memory.view(), config, threads);
}

}  // namespace decap

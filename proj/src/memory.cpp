// SPDX-License-Identifier: Apache-2.0
#include "decap/memory.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "decap/error.hpp"
#include "decap/rng.hpp"

namespace decap {
namespace {

constexpr char kMagic[4] = {'D', 'C', 'A', 'P'};
// Rows read from foreign files (e.g. f16 exporters) may drift this far from
// unit norm; they are re-normalized on load.
constexpr double kForeignUnitTolerance = 1e-3;

double row_norm(std::span<const float> row) {
  double s = 0.0;
  for (float x : row) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) words.push_back(std::move(w));
  return words;
}

CorpusEntry make_entry(std::string text) {
  CorpusEntry e;
  e.length = split_words(text).size();
  if (e.length == 0) throw Error(ErrorCode::kInvalidArgument, "corpus entry has no words");
  e.text = std::move(text);
  return e;
}

std::vector<CorpusEntry> make_corpus(const std::vector<std::string>& texts) {
  std::vector<CorpusEntry> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(make_entry(t));
  return out;
}

void PrecomputedEncoder::insert(std::string text, std::vector<double> raw) {
  if (raw.size() != dim_) {
    throw Error(ErrorCode::kDimensionMismatch, "precomputed embedding for '" + text +
                                                   "' has dim " + std::to_string(raw.size()));
  }
  table_.insert_or_assign(std::move(text), std::move(raw));
}

RawEmbedding PrecomputedEncoder::encode(std::string_view text) const {
  auto it = table_.find(std::string(text));
  if (it == table_.end()) {
    throw Error(ErrorCode::kEncoderFailure, "no precomputed embedding for '" + std::string(text) + "'");
  }
  return {it->second, l2_norm(it->second)};
}

SupportMemory::SupportMemory(std::size_t dim) : dim_(dim) {
  if (dim == 0) throw Error(ErrorCode::kInvalidArgument, "memory dimension must be positive");
}

void SupportMemory::reserve(std::size_t n) {
  data_.reserve(n * dim_);
  prenorms_.reserve(n);
  texts_.reserve(n);
}

void SupportMemory::add(const Embedding& embedding, double prenorm, std::string text) {
  if (embedding.dim() != dim_) {
    throw Error(ErrorCode::kDimensionMismatch, "embedding dim " + std::to_string(embedding.dim()) +
                                                   " vs memory dim " + std::to_string(dim_));
  }
  for (double v : embedding.values()) data_.push_back(static_cast<float>(v));
  prenorms_.push_back(static_cast<float>(prenorm));
  texts_.push_back(std::move(text));
}

void SupportMemory::add_row(std::span<const float> row, double prenorm, std::string text) {
  if (row.size() != dim_) {
    throw Error(ErrorCode::kDimensionMismatch, "row dim " + std::to_string(row.size()) +
                                                   " vs memory dim " + std::to_string(dim_));
  }
  const double n = row_norm(row);
  if (std::abs(n - 1.0) > 1e-5) {
    throw Error(ErrorCode::kInvalidArgument, "memory row is not unit norm");
  }
  data_.insert(data_.end(), row.begin(), row.end());
  prenorms_.push_back(static_cast<float>(prenorm));
  texts_.push_back(std::move(text));
}

SupportMemory SupportMemory::subset(std::span<const std::size_t> indices) const {
  SupportMemory out(dim_);
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    auto r = row(i);
    out.data_.insert(out.data_.end(), r.begin(), r.end());
    out.prenorms_.push_back(prenorms_[i]);
    out.texts_.push_back(texts_[i]);
  }
  return out;
}

bool operator==(const SupportMemory& a, const SupportMemory& b) {
  if (a.dim_ != b.dim_ || a.size() != b.size() || a.texts_ != b.texts_) return false;
  return std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0 &&
         std::memcmp(a.prenorms_.data(), b.prenorms_.data(), a.prenorms_.size() * sizeof(float)) == 0;
}

SupportMemory build_memory(std::span<const CorpusEntry> corpus, const TextEncoder& encoder) {
  if (corpus.empty()) throw Error(ErrorCode::kEmptyCorpus, "cannot build memory from empty corpus");
  SupportMemory memory(encoder.dim());
  memory.reserve(corpus.size());
  for (const auto& entry : corpus) {
    RawEmbedding raw;
    Normalized n;
    try {
      raw = encoder.encode(entry.text);
      n = normalize(raw.values, encoder.dim());
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kEncoderFailure) throw;
      throw Error(ErrorCode::kEncoderFailure, "'" + entry.text + "': " + e.what(), e.cause());
    }
    memory.add(n.embedding, n.prenorm, entry.text);
  }
  return memory;
}

std::vector<CorpusEntry> filter_by_norm_and_length(std::span<const CorpusEntry> corpus,
                                                   const TextEncoder& encoder,
                                                   std::size_t max_len, double max_prenorm) {
  if (max_len < 1 || !(max_prenorm > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "max_len must be >= 1 and max_prenorm > 0");
  }
  std::vector<CorpusEntry> kept;
  for (const auto& entry : corpus) {
    if (entry.length >= max_len) continue;
    double prenorm;
    try {
      prenorm = encoder.encode(entry.text).prenorm;
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kEncoderFailure) throw;
      throw Error(ErrorCode::kEncoderFailure, "'" + entry.text + "': " + e.what(), e.cause());
    }
    if (prenorm < max_prenorm) kept.push_back(entry);
  }
  return kept;
}

SupportMemory filter_memory_by_norm_and_length(const SupportMemory& memory, std::size_t max_len,
                                               double max_prenorm) {
  if (max_len < 1 || !(max_prenorm > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "max_len must be >= 1 and max_prenorm > 0");
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < memory.size(); ++i) {
    if (split_words(memory.text(i)).size() < max_len && memory.prenorm(i) < max_prenorm) {
      keep.push_back(i);
    }
  }
  return memory.subset(keep);
}

std::pair<SupportMemory, FilterReport> compact_by_similarity(const SupportMemory& memory,
                                                             double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "threshold must be in (0, 1]");
  }
  const std::size_t d = memory.dim();
  FilterReport report;
  report.input_count = memory.size();
  report.threshold = threshold;

  std::vector<float> kept_rows;
  std::vector<double> candidate(d);
  for (std::size_t i = 0; i < memory.size(); ++i) {
    const auto row = memory.row(i);
    std::copy(row.begin(), row.end(), candidate.begin());
    std::optional<std::size_t> witness;
    for (std::size_t k = 0; k < report.retained.size(); ++k) {
      std::span<const float> kept{kept_rows.data() + k * d, d};
      if (dot(kept, candidate) > threshold) {
        witness = report.retained[k];
        break;
      }
    }
    if (witness) {
      report.removed_cover.emplace(i, *witness);
    } else {
      report.retained.push_back(i);
      kept_rows.insert(kept_rows.end(), row.begin(), row.end());
    }
  }
  report.retained_count = report.retained.size();
  return {memory.subset(report.retained), std::move(report)};
}

SupportMemory sample_memory(const SupportMemory& memory, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "fraction must be in (0, 1]");
  }
  const std::size_t n = memory.size();
  // The small epsilon keeps e.g. 0.07 * 100 from rounding up to 8.
  auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  k = std::clamp<std::size_t>(k, n == 0 ? 0 : 1, n);
  Rng rng(seed);
  const auto picked = rng.sample_without_replacement(n, k);
  return memory.subset(picked);
}

std::vector<std::uint8_t> encode_memory(const SupportMemory& memory) {
  detail::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kMemoryFormatVersion);
  w.u16(0);
  w.u32(static_cast<std::uint32_t>(memory.dim()));
  w.u64(memory.size());
  w.buffer().reserve(20 + memory.data().size() * 4 + memory.size() * 8);
  for (float v : memory.data()) w.f32(v);
  for (float v : memory.prenorms()) w.f32(v);
  for (const auto& t : memory.texts()) w.str(t);
  return std::move(w.buffer());
}

SupportMemory decode_memory(std::span<const std::uint8_t> bytes,
                            std::optional<std::size_t> expected_dim) {
  detail::ByteReader r(bytes);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw Error(ErrorCode::kBadMagic, "not a DCAP file");
  const std::uint16_t version = r.u16();
  if (version != kMemoryFormatVersion) {
    throw Error(ErrorCode::kVersionUnsupported, "DCAP version " + std::to_string(version));
  }
  r.u16();  // flags, reserved
  const std::uint32_t dim = r.u32();
  const std::uint64_t count = r.u64();
  if (dim == 0) throw Error(ErrorCode::kDimensionMismatch, "DCAP dim is zero");
  if (expected_dim && *expected_dim != dim) {
    throw Error(ErrorCode::kDimensionMismatch, "file dim " + std::to_string(dim) +
                                                   ", expected " + std::to_string(*expected_dim));
  }
  // Reject before allocating: each entry needs at least dim+1 floats and a length.
  if (count > r.remaining() / (static_cast<std::uint64_t>(dim) * 4 + 8)) {
    r.need(static_cast<std::size_t>(std::min<std::uint64_t>(count * (dim * 4ULL + 8), SIZE_MAX)));
  }

  std::vector<float> rows(count * dim);
  for (float& v : rows) v = r.f32();
  std::vector<float> prenorms(count);
  for (float& v : prenorms) v = r.f32();

  SupportMemory memory(dim);
  memory.reserve(count);
  std::vector<double> tmp(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::span<const float> row{rows.data() + i * dim, dim};
    std::string text = r.str();
    const double n = row_norm(row);
    if (std::abs(n - 1.0) <= 1e-5) {
      memory.add_row(row, prenorms[i], std::move(text));
    } else if (std::abs(n - 1.0) <= kForeignUnitTolerance) {
      std::copy(row.begin(), row.end(), tmp.begin());
      memory.add(normalize(tmp).embedding, prenorms[i], std::move(text));
    } else {
      throw Error(ErrorCode::kCorruptData, "row " + std::to_string(i) + " is not unit norm");
    }
  }
  if (!r.done()) throw Error(ErrorCode::kCorruptData, "trailing bytes after DCAP payload");
  return memory;
}

void save_memory(const SupportMemory& memory, const std::filesystem::path& path) {
  if (memory.dim() == 0) throw Error(ErrorCode::kInvalidArgument, "memory has no dimension");
  detail::write_file_atomic(path, encode_memory(memory));
}

SupportMemory load_memory(const std::filesystem::path& path, std::optional<std::size_t> expected_dim) {
  return decode_memory(detail::read_file(path), expected_dim);
}

std::vector<JsonlRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<JsonlRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      JsonlRecord rec;
      rec.text = j.at("text").get<std::string>();
      if (j.contains("embedding")) rec.embedding = j["embedding"].get<std::vector<double>>();
      if (j.contains("prenorm") && !j["prenorm"].is_null()) rec.prenorm = j["prenorm"].get<double>();
      out.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kCorruptData,
                  path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::vector<JsonlRecord>& records, const std::filesystem::path& path) {
  std::string body;
  for (const auto& rec : records) {
    nlohmann::json j;
    j["text"] = rec.text;
    if (rec.embedding) j["embedding"] = *rec.embedding;
    if (rec.prenorm) j["prenorm"] = *rec.prenorm;
    body += j.dump();
    body += '\n';
  }
  detail::write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(body.data()), body.size()));
}

SupportMemory memory_from_jsonl(const std::vector<JsonlRecord>& records) {
  if (records.empty()) throw Error(ErrorCode::kEmptyCorpus, "no JSONL records");
  if (!records.front().embedding) throw Error(ErrorCode::kCorruptData, "JSONL record lacks embedding");
  SupportMemory memory(records.front().embedding->size());
  memory.reserve(records.size());
  for (const auto& rec : records) {
    if (!rec.embedding) throw Error(ErrorCode::kCorruptData, "JSONL record lacks embedding");
    auto n = normalize(*rec.embedding, memory.dim());
    memory.add(n.embedding, rec.prenorm.value_or(n.prenorm), rec.text);
  }
  return memory;
}

SupportMemory load_embeddings(const std::filesystem::path& path, std::optional<std::size_t> expected_dim) {
  auto bytes = detail::read_file(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) == 0) {
    return decode_memory(bytes, expected_dim);
  }
  auto memory = memory_from_jsonl(read_jsonl(path));
  if (expected_dim && memory.dim() != *expected_dim) {
    throw Error(ErrorCode::kDimensionMismatch, "JSONL dim " + std::to_string(memory.dim()));
  }
  return memory;
}

}  // namespace decap

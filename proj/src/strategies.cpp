// SPDX-License-Identifier: Apache-2.0
#include "decap/strategies.hpp"

#include <algorithm>
#include <numeric>

#include "decap/error.hpp"
#include "decap/rng.hpp"

namespace decap {

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kProjection: return "pd";
    case Strategy::kNearestNeighbor: return "nnd";
    case Strategy::kVisual: return "vd";
    case Strategy::kRetrieval: return "retrieve";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "pd") return Strategy::kProjection;
  if (name == "nnd") return Strategy::kNearestNeighbor;
  if (name == "vd") return Strategy::kVisual;
  if (name == "retrieve") return Strategy::kRetrieval;
  throw Error(ErrorCode::kInvalidArgument, "unknown strategy '" + std::string(name) + "'");
}

Embedding prefix_pd(const Embedding& query, const SupportMemory& memory, const ProjectionConfig& config,
                    unsigned threads) {
  return project(query, memory, config, threads).projected;
}

Nearest prefix_nnd(const Embedding& query, const SupportMemory& memory, unsigned threads) {
  const std::size_t i = argmax_similarity(query, memory.view(), threads);
  return {memory.embedding(i), i};
}

std::vector<Retrieved> retrieve_cliprre(const Embedding& query, const SupportMemory& memory, std::size_t k,
                                        unsigned threads) {
  if (memory.empty()) throw Error(ErrorCode::kEmptyMemory, "support memory is empty");
  if (k < 1 || k > memory.size()) {
    throw Error(ErrorCode::kKOutOfRange, "k = " + std::to_string(k) + " with N = " + std::to_string(memory.size()));
  }
  const auto sims = similarities(query, memory.view(), threads);
  std::vector<std::size_t> idx(sims.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return sims[a] > sims[b] || (sims[a] == sims[b] && a < b); });
  std::vector<Retrieved> out;
  out.reserve(k);
  for (std::size_t r = 0; r < k; ++r) out.push_back({idx[r], memory.text(idx[r]), sims[idx[r]]});
  return out;
}

Embedding pool_frames(std::span<const Embedding> frames, std::size_t k, std::uint64_t seed) {
  if (frames.empty()) throw Error(ErrorCode::kEmptyInput, "no frames to pool");
  if (k < 1) throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");
  const std::size_t dim = frames.front().dim();
  Rng rng(seed);
  const auto picked = rng.sample_without_replacement(frames.size(), std::min(k, frames.size()));
  std::vector<double> mean(dim, 0.0);
  for (std::size_t i : picked) {
    if (frames[i].dim() != dim) throw Error(ErrorCode::kDimensionMismatch, "frame dims differ");
    for (std::size_t j = 0; j < dim; ++j) mean[j] += frames[i][j];
  }
  for (double& x : mean) x /= static_cast<double>(picked.size());
  if (!(l2_norm(mean) >= 1e-12)) {
    throw Error(ErrorCode::kDegenerateCombination, "pooled frame mean has zero norm");
  }
  return normalize(mean).embedding;
}

std::vector<int> apply_prompt(const PromptSpec& spec, const Vocab& vocab) { return vocab.encode(spec.text); }

std::string caption(const Embedding& query, const StrategyChoice& choice, const DecoderModel* model,
                    const SupportMemory* memory, std::span<const int> prompt, unsigned threads) {
  auto need_memory = [&]() -> const SupportMemory& {
    if (!memory) throw Error(ErrorCode::kEmptyMemory, std::string(to_string(choice.kind)) + " needs a support memory");
    return *memory;
  };
  if (choice.kind == Strategy::kRetrieval) {
    return retrieve_cliprre(query, need_memory(), 1, threads).front().text;
  }
  if (!model) throw Error(ErrorCode::kInvalidArgument, "decoding strategies need a decoder model");
  Embedding prefix;
  switch (choice.kind) {
    case Strategy::kProjection: prefix = prefix_pd(query, need_memory(), choice.config, threads); break;
    case Strategy::kNearestNeighbor: prefix = prefix_nnd(query, need_memory(), threads).embedding; break;
    case Strategy::kVisual: prefix = prefix_vd(query); break;
    case Strategy::kRetrieval: break;
  }
  return model->vocab().decode(decode_greedy(*model, prefix, prompt));
}

}  // namespace decap

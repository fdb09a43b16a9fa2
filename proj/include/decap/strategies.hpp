// SPDX-License-Identifier: Apache-2.0
//
// Inference strategies: turn a query (image) embedding into the decoder's
// prefix embedding, or retrieve a stored caption directly.
//
//   pd        temperature-softmax projection onto the support memory
//   nnd       nearest memory entry
//   vd        the query itself (no gap correction)
//   retrieve  top-k stored texts, no decoder
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "decap/decoder.hpp"
#include "decap/embedding.hpp"
#include "decap/memory.hpp"

namespace decap {

enum class Strategy { kProjection, kNearestNeighbor, kVisual, kRetrieval };

std::string_view to_string(Strategy s);
/// Accepts "pd", "nnd", "vd", "retrieve". Throws InvalidArgument.
Strategy parse_strategy(std::string_view name);

struct StrategyChoice {
  Strategy kind = Strategy::kProjection;
  ProjectionConfig config;  // read by kProjection only
};

/// Prompt text force-fed after the prefix embedding, e.g. "there is".
struct PromptSpec {
  std::string text;
};

Embedding prefix_pd(const Embedding& query, const SupportMemory& memory, const ProjectionConfig& config,
                    unsigned threads = 1);

struct Nearest {
  Embedding embedding;
  std::size_t index = 0;
};

/// Throws EmptyMemory.
Nearest prefix_nnd(const Embedding& query, const SupportMemory& memory, unsigned threads = 1);

inline Embedding prefix_vd(const Embedding& query) { return query; }

struct Retrieved {
  std::size_t index = 0;
  std::string text;
  double score = 0.0;
};

/// Top-k texts by similarity, descending; ties go to the lower index.
/// Throws EmptyMemory, KOutOfRange.
std::vector<Retrieved> retrieve_cliprre(const Embedding& query, const SupportMemory& memory, std::size_t k,
                                        unsigned threads = 1);

inline constexpr std::size_t kDefaultPooledFrames = 10;

/// Mean of min(k, |frames|) frames sampled without replacement, re-normalized.
/// Throws EmptyInput, DegenerateCombination.
Embedding pool_frames(std::span<const Embedding> frames, std::size_t k = kDefaultPooledFrames,
                      std::uint64_t seed = 0);

/// Token ids of the prompt. Throws UnknownToken.
std::vector<int> apply_prompt(const PromptSpec& spec, const Vocab& vocab);

/// Full caption for one query under the chosen strategy. Retrieval returns
/// the rank-1 stored text; the others decode greedily after `prompt`.
std::string caption(const Embedding& query, const StrategyChoice& choice, const DecoderModel* model,
                    const SupportMemory* memory, std::span<const int> prompt = {}, unsigned threads = 1);

}  // namespace decap

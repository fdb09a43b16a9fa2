// SPDX-License-Identifier: Apache-2.0
//
// Prefix-conditioned autoregressive decoder trained from scratch to invert a
// frozen text encoder. The input sequence is
//
//   [adapter(prefix)] <bos> w_1 ... w_n
//
// and position i predicts w_{i} (then <eos>). The model is a pre-LN causal
// self-attention stack with learned positions; gradients are hand-derived.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "decap/embedding.hpp"
#include "decap/memory.hpp"

namespace decap {

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;

  Vocab() : Vocab(std::vector<std::string>{}) {}
  /// Special tokens first, then the distinct words in sorted order.
  explicit Vocab(std::vector<std::string> words);
  /// Rebuilds from explicit (token, id) pairs; ids must be 0..n-1 and the
  /// three special tokens must be present at their fixed ids.
  static Vocab from_pairs(const std::map<std::string, int>& pairs);

  std::size_t size() const noexcept { return tokens_.size(); }
  /// Throws UnknownToken.
  int id(std::string_view token) const;
  std::optional<int> find(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  /// Whitespace tokenization; throws UnknownToken.
  std::vector<int> encode(std::string_view text) const;
  /// Joins tokens with single spaces, skipping special tokens.
  std::string decode(std::span<const int> ids) const;

  /// (token, id) pairs sorted by token bytes.
  std::map<std::string, int> pairs() const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> ids_;
};

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kBosToken = "<bos>";
inline constexpr const char* kEosToken = "<eos>";

struct DecoderShape {
  std::size_t prefix_dim = kDefaultDim;  // d, the embedding dimension
  std::size_t width = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn = 256;
  std::size_t max_len = 32;  // generation cap; also bounds training sequences

  void validate() const;

  /// 2 layers, 2 heads, width 64: trains in seconds on a CPU.
  static DecoderShape toy(std::size_t prefix_dim);
  /// The 4-layer, 4-head, width-768 reference shape.
  static DecoderShape reference(std::size_t prefix_dim = kDefaultDim);
};

struct TrainConfig {
  std::size_t steps = 40000;
  std::size_t batch_size = 128;
  double learning_rate = 1e-5;
  double label_smoothing = 0.1;
  std::size_t warmup_steps = 2000;
  std::uint64_t seed = 0;

  // AdamW
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  bool cosine_decay = false;
  double min_lr_ratio = 0.1;

  void validate() const;

  /// Scaled-down settings that make the toy world converge in a few thousand steps.
  static TrainConfig toy();
};

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// One training / scoring example: prefix embedding values and target words.
struct Example {
  std::span<const double> prefix;
  std::span<const int> tokens;
};

class DecoderModel {
 public:
  DecoderModel(Vocab vocab, DecoderShape shape, std::uint64_t seed = 0);

  const Vocab& vocab() const noexcept { return vocab_; }
  const DecoderShape& shape() const noexcept { return shape_; }

  std::span<const double> parameters() const noexcept { return params_; }
  std::span<double> parameters() noexcept { return params_; }
  const std::vector<TensorInfo>& tensors() const noexcept { return tensors_; }
  /// Throws InvalidArgument for an unknown name.
  std::span<double> tensor(std::string_view name);
  std::span<const double> tensor(std::string_view name) const;

  /// Rounds every parameter to the nearest f32 so checkpoints are exact.
  void round_to_f32();

  /// Mean (over examples) of the per-sentence mean smoothed NLL, and its
  /// gradient with respect to every parameter (same layout as parameters()).
  double loss_and_gradient(std::span<const Example> batch, double label_smoothing,
                           std::vector<double>* gradient) const;

  /// Next-token distribution after <bos> + `context`.
  std::vector<double> next_token_distribution(std::span<const double> prefix,
                                              std::span<const int> context) const;

  friend bool operator==(const DecoderModel& a, const DecoderModel& b);

 private:
  void layout();
  void check_example(const Example& e) const;

  Vocab vocab_;
  DecoderShape shape_;
  std::vector<TensorInfo> tensors_;
  std::vector<double> params_;
};

/// Per-sentence mean of -log P(w_i | w_<i, prefix) over the words and the
/// closing <eos>, with label smoothing. Throws SequenceTooLong, UnknownToken,
/// DimensionMismatch.
double recons_loss(const DecoderModel& model, const Embedding& prefix, std::span<const int> tokens,
                   double label_smoothing = 0.0);

struct TrainLog {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;  // mean of step losses per pass over the corpus
};

/// Minimizes the reconstruction loss with AdamW over the frozen encoder's
/// embeddings of `corpus`. Deterministic for a fixed seed.
DecoderModel train(DecoderModel model, std::span<const CorpusEntry> corpus,
                   const TextEncoder& encoder, const TrainConfig& config,
                   TrainLog* log = nullptr);

/// Greedy decoding: <bos>, then the forced prompt tokens, then argmax tokens
/// (lowest id on ties, specials other than <eos> excluded) until <eos> or
/// max_len tokens. The result includes the prompt and excludes <bos>/<eos>.
std::vector<int> decode_greedy(const DecoderModel& model, const Embedding& prefix,
                               std::span<const int> prompt, std::size_t max_len);
std::vector<int> decode_greedy(const DecoderModel& model, const Embedding& prefix,
                               std::span<const int> prompt = {});

/// t*_i = decode(m_i) for every memory row, in memory order.
std::vector<CorpusEntry> reconstruct_corpus(const DecoderModel& model, const SupportMemory& memory,
                                            std::span<const int> prompt = {});

// DCPM checkpoint, little-endian:
//   "DCPM" | u16 version=1 | u16 flags=0
//   u32 n_config, then n_config x (u32 len, name, i64 value)
//   u32 n_tensors, then per tensor: u32 len, name, u32 rank, u32 dims[rank], f32 data
//   u32 vocab_size, then (u32 len, token, u32 id) sorted by token
inline constexpr std::uint16_t kModelFormatVersion = 1;

std::vector<std::uint8_t> encode_model(const DecoderModel& model);
DecoderModel decode_model(std::span<const std::uint8_t> bytes);
void save_model(const DecoderModel& model, const std::filesystem::path& path);
/// Throws Io, BadMagic, VersionUnsupported, Truncated, CorruptData, DimensionMismatch.
DecoderModel load_model(const std::filesystem::path& path);

}  // namespace decap

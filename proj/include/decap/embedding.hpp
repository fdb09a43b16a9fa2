// SPDX-License-Identifier: Apache-2.0
//
// Dense vector primitives shared by every stage: unit-norm embeddings, cosine
// similarity, temperature softmax and the support-memory projection kernel.
//
// Storage is f32 (memory rows); every reduction accumulates in f64.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace decap {

inline constexpr std::size_t kDefaultDim = 512;

/// Temperature used for single-image queries.
inline constexpr double kImageTemperature = 1.0 / 100.0;
/// Temperature used for mean-pooled video queries.
inline constexpr double kVideoTemperature = 1.0 / 150.0;

/// Unit-norm, finite vector. Only constructible through `normalize` or
/// `Embedding::from_unit`, which both enforce the invariant.
class Embedding {
 public:
  Embedding() = default;

  /// Wraps values that are already unit norm (within 1e-5) and finite.
  static Embedding from_unit(std::vector<double> values);
  static Embedding from_unit(std::span<const float> values);

  std::size_t dim() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  friend bool operator==(const Embedding&, const Embedding&) = default;

 private:
  explicit Embedding(std::vector<double> values) : values_(std::move(values)) {}
  friend struct Normalized normalize(std::span<const double> raw);

  std::vector<double> values_;
};

/// Encoder output before normalization.
struct RawEmbedding {
  std::vector<double> values;
  double prenorm = 0.0;  // l2 norm of `values`
};

struct Normalized {
  Embedding embedding;
  double prenorm = 0.0;
};

/// Scales `raw` to unit norm and reports the original norm.
/// Throws ZeroVector when the norm is below 1e-12.
Normalized normalize(std::span<const double> raw);
/// As above, additionally requiring raw.size() == dim (DimensionMismatch).
Normalized normalize(std::span<const double> raw, std::size_t dim);

double l2_norm(std::span<const double> v);

/// Dot product of two unit vectors, clamped to [-1, 1]. For unit-norm inputs
/// this is exactly the cosine similarity, so m^T v and cos(m, v) coincide.
double cosine(const Embedding& a, const Embedding& b);

struct ProjectionConfig {
  double temperature = kImageTemperature;
  /// Max-subtraction before exponentiation. Only the naive-oracle tests turn
  /// this off; at tau = 1/150 the unshifted exponent overflows.
  bool stable_softmax = true;

  void validate() const;
};

/// w_i = exp(s_i / tau) / sum_k exp(s_k / tau). Throws EmptyInput.
std::vector<double> softmax_weights(std::span<const double> similarities,
                                    const ProjectionConfig& config);

/// Non-owning row-major view over `count` rows of `dim` f32 values.
struct MatrixView {
  const float* data = nullptr;
  std::size_t count = 0;
  std::size_t dim = 0;

  std::span<const float> row(std::size_t i) const { return {data + i * dim, dim}; }
};

struct ProjectionResult {
  Embedding projected;                  // raw_combination / |raw_combination|
  std::vector<double> weights;          // softmax weights, one per memory row
  std::vector<double> raw_combination;  // sum_i w_i * m_i
};

/// Rows processed per block by the similarity kernels. Block boundaries do
/// not depend on the thread count, so results are identical for any
/// parallelism degree.
inline constexpr std::size_t kBlockRows = 256;

/// Temperature-softmax weighted combination of all memory rows, with weights
/// from the similarity of each row to `query`.
/// Throws EmptyMemory, DimensionMismatch, DegenerateCombination.
ProjectionResult project(const Embedding& query, MatrixView memory,
                         const ProjectionConfig& config, unsigned threads = 1);

/// m_i^T query for every row, f64 accumulation.
std::vector<double> similarities(const Embedding& query, MatrixView memory,
                                 unsigned threads = 1);

/// Row with the highest similarity; lowest index wins ties.
std::size_t argmax_similarity(const Embedding& query, MatrixView memory,
                              unsigned threads = 1);

/// f32 row . f64 vector with a fixed 8-lane accumulation order.
double dot(std::span<const float> a, std::span<const double> b);

}  // namespace decap

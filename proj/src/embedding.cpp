// SPDX-License-Identifier: Apache-2.0
#include "decap/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "decap/error.hpp"
#include "decap/parallel.hpp"

namespace decap {
namespace {

constexpr double kZeroNorm = 1e-12;
constexpr double kUnitTolerance = 1e-5;

void require_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(ErrorCode::kInvalidArgument, "non-finite component");
  }
}

void require_unit(std::span<const double> v) {
  require_finite(v);
  const double n = l2_norm(v);
  if (std::abs(n - 1.0) > kUnitTolerance) {
    throw Error(ErrorCode::kInvalidArgument, "vector is not unit norm (|v| = " +
                                                 std::to_string(n) + ")");
  }
}

// Softmax partial over a contiguous block of rows, relative to the block max.
struct Partial {
  double max = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  std::vector<double> acc;
};

void merge_into(Partial& into, const Partial& other, double temperature) {
  const double m = std::max(into.max, other.max);
  const double a = std::exp((into.max - m) / temperature);
  const double b = std::exp((other.max - m) / temperature);
  into.sum = into.sum * a + other.sum * b;
  for (std::size_t j = 0; j < into.acc.size(); ++j) {
    into.acc[j] = into.acc[j] * a + other.acc[j] * b;
  }
  into.max = m;
}

// Pairwise reduction over [begin, end) in index order.
Partial reduce_tree(std::vector<Partial>& parts, std::size_t begin, std::size_t end,
                    double temperature) {
  if (end - begin == 1) return std::move(parts[begin]);
  const std::size_t mid = begin + (end - begin) / 2;
  Partial left = reduce_tree(parts, begin, mid, temperature);
  Partial right = reduce_tree(parts, mid, end, temperature);
  merge_into(left, right, temperature);
  return left;
}

void check_query(const Embedding& query, MatrixView memory) {
  if (memory.count == 0) throw Error(ErrorCode::kEmptyMemory, "support memory is empty");
  if (query.dim() != memory.dim) {
    throw Error(ErrorCode::kDimensionMismatch,
                "query dim " + std::to_string(query.dim()) + " vs memory dim " +
                    std::to_string(memory.dim));
  }
}

std::size_t block_count(std::size_t rows) { return (rows + kBlockRows - 1) / kBlockRows; }

}  // namespace

Embedding Embedding::from_unit(std::vector<double> values) {
  require_unit(values);
  return Embedding(std::move(values));
}

Embedding Embedding::from_unit(std::span<const float> values) {
  std::vector<double> v(values.begin(), values.end());
  require_unit(v);
  // f32 storage is unit only to ~1e-7; restore the invariant at f64 precision.
  const double n = l2_norm(v);
  for (double& x : v) x /= n;
  return Embedding(std::move(v));
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

Normalized normalize(std::span<const double> raw) {
  require_finite(raw);
  const double n = l2_norm(raw);
  if (!(n >= kZeroNorm)) throw Error(ErrorCode::kZeroVector, "cannot normalize a zero vector");
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] / n;
  return {Embedding(std::move(out)), n};
}

Normalized normalize(std::span<const double> raw, std::size_t dim) {
  if (raw.size() != dim) {
    throw Error(ErrorCode::kDimensionMismatch, "expected dim " + std::to_string(dim) +
                                                   ", got " + std::to_string(raw.size()));
  }
  return normalize(raw);
}

double cosine(const Embedding& a, const Embedding& b) {
  if (a.dim() != b.dim()) throw Error(ErrorCode::kDimensionMismatch, "cosine of unequal dims");
  double s = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) s += a[i] * b[i];
  return std::clamp(s, -1.0, 1.0);
}

void ProjectionConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::kInvalidArgument, "temperature must be positive and finite");
  }
}

std::vector<double> softmax_weights(std::span<const double> similarities,
                                    const ProjectionConfig& config) {
  config.validate();
  if (similarities.empty()) throw Error(ErrorCode::kEmptyInput, "softmax of empty input");
  const double shift = config.stable_softmax
                           ? *std::max_element(similarities.begin(), similarities.end())
                           : 0.0;
  std::vector<double> w(similarities.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp((similarities[i] - shift) / config.temperature);
    sum += w[i];
  }
  for (double& x : w) x /= sum;
  return w;
}

double dot(std::span<const float> a, std::span<const double> b) {
  const std::size_t d = a.size();
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t j = 0;
  for (; j + 8 <= d; j += 8) {
    for (std::size_t k = 0; k < 8; ++k) {
      acc[k] += static_cast<double>(a[j + k]) * b[j + k];
    }
  }
  double s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; j < d; ++j) s += static_cast<double>(a[j]) * b[j];
  return s;
}

std::vector<double> similarities(const Embedding& query, MatrixView memory, unsigned threads) {
  check_query(query, memory);
  std::vector<double> sims(memory.count);
  const auto q = query.values();
  parallel_for(block_count(memory.count), threads, [&](std::size_t block) {
    const std::size_t begin = block * kBlockRows;
    const std::size_t end = std::min(memory.count, begin + kBlockRows);
    for (std::size_t i = begin; i < end; ++i) sims[i] = dot(memory.row(i), q);
  });
  return sims;
}

std::size_t argmax_similarity(const Embedding& query, MatrixView memory, unsigned threads) {
  const auto sims = similarities(query, memory, threads);
  // max_element returns the first maximum, which is the lowest index.
  return static_cast<std::size_t>(std::max_element(sims.begin(), sims.end()) - sims.begin());
}

ProjectionResult project(const Embedding& query, MatrixView memory,
                         const ProjectionConfig& config, unsigned threads) {
  config.validate();
  check_query(query, memory);
  const std::size_t d = memory.dim;
  const double tau = config.temperature;
  const auto q = query.values();

  std::vector<double> sims(memory.count);
  std::vector<Partial> parts(block_count(memory.count));

  // One pass over memory: similarities and the block's weighted sum are
  // computed while the rows are still in cache.
  parallel_for(parts.size(), threads, [&](std::size_t block) {
    const std::size_t begin = block * kBlockRows;
    const std::size_t end = std::min(memory.count, begin + kBlockRows);
    Partial& p = parts[block];
    for (std::size_t i = begin; i < end; ++i) {
      sims[i] = dot(memory.row(i), q);
      p.max = std::max(p.max, sims[i]);
    }
    if (!config.stable_softmax) p.max = 0.0;
    p.acc.assign(d, 0.0);
    double* acc = p.acc.data();
    std::size_t i = begin;
    for (; i + 4 <= end; i += 4) {
      const double e0 = std::exp((sims[i] - p.max) / tau);
      const double e1 = std::exp((sims[i + 1] - p.max) / tau);
      const double e2 = std::exp((sims[i + 2] - p.max) / tau);
      const double e3 = std::exp((sims[i + 3] - p.max) / tau);
      p.sum += ((e0 + e1) + (e2 + e3));
      const float* r0 = memory.data + i * d;
      const float* r1 = r0 + d;
      const float* r2 = r1 + d;
      const float* r3 = r2 + d;
      for (std::size_t j = 0; j < d; ++j) {
        acc[j] += (e0 * static_cast<double>(r0[j]) + e1 * static_cast<double>(r1[j])) +
                  (e2 * static_cast<double>(r2[j]) + e3 * static_cast<double>(r3[j]));
      }
    }
    for (; i < end; ++i) {
      const double e = std::exp((sims[i] - p.max) / tau);
      p.sum += e;
      const float* row = memory.data + i * d;
      for (std::size_t j = 0; j < d; ++j) acc[j] += e * static_cast<double>(row[j]);
    }
  });

  Partial total = reduce_tree(parts, 0, parts.size(), tau);
  if (!std::isfinite(total.sum) || !(total.sum > 0.0)) {
    throw Error(ErrorCode::kDegenerateCombination, "softmax normalizer is not finite");
  }

  ProjectionResult result;
  result.weights.resize(memory.count);
  for (std::size_t i = 0; i < memory.count; ++i) {
    result.weights[i] = std::exp((sims[i] - total.max) / tau) / total.sum;
  }
  result.raw_combination.resize(d);
  for (std::size_t j = 0; j < d; ++j) result.raw_combination[j] = total.acc[j] / total.sum;

  const double n = l2_norm(result.raw_combination);
  if (!(n >= kZeroNorm) || !std::isfinite(n)) {
    throw Error(ErrorCode::kDegenerateCombination, "projected combination has zero norm");
  }
  result.projected = normalize(result.raw_combination).embedding;
  return result;
}

}  // namespace decap

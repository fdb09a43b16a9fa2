// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used by the tests. They share no code
// with the library beyond the data containers and are written for clarity,
// not speed: long double accumulation, plain loops, full sorts.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "decap/embedding.hpp"
#include "decap/memory.hpp"

namespace oracle {

using Vec = std::vector<double>;

inline long double norm(const std::vector<long double>& v) {
  long double s = 0;
  for (long double x : v) s += x * x;
  return std::sqrt(s);
}

inline long double norm(const Vec& v) {
  long double s = 0;
  for (double x : v) s += static_cast<long double>(x) * x;
  return std::sqrt(s);
}

struct Projection {
  std::vector<long double> weights;
  std::vector<long double> raw;
  std::vector<long double> projected;
};

/// Softmax-weighted combination evaluated term by term in long double.
inline Projection project(const Vec& query, const std::vector<Vec>& rows, long double tau) {
  const std::size_t n = rows.size(), d = query.size();
  std::vector<long double> s(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) s[i] += static_cast<long double>(rows[i][j]) * query[j];
  }
  const long double top = *std::max_element(s.begin(), s.end());
  Projection p;
  p.weights.resize(n);
  long double z = 0;
  for (std::size_t i = 0; i < n; ++i) z += p.weights[i] = std::exp((s[i] - top) / tau);
  for (auto& w : p.weights) w /= z;
  p.raw.assign(d, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) p.raw[j] += p.weights[i] * rows[i][j];
  }
  const long double r = norm(p.raw);
  p.projected = p.raw;
  for (auto& x : p.projected) x /= r;
  return p;
}

/// Rows of a memory promoted to double.
inline std::vector<Vec> rows_of(const decap::SupportMemory& m) {
  std::vector<Vec> out;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto r = m.row(i);
    out.emplace_back(r.begin(), r.end());
  }
  return out;
}

/// Gaussian vector scaled to unit norm (test-side generator, std::mt19937_64).
inline Vec random_unit(std::mt19937_64& g, std::size_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec v(d);
  long double s;
  do {
    for (double& x : v) x = n(g);
    s = norm(v);
  } while (s < 1e-6);
  for (double& x : v) x = static_cast<double>(x / s);
  return v;
}

inline decap::Embedding unit_embedding(std::mt19937_64& g, std::size_t d) {
  return decap::normalize(random_unit(g, d)).embedding;
}

inline decap::SupportMemory random_memory(std::mt19937_64& g, std::size_t count, std::size_t d) {
  decap::SupportMemory m(d);
  for (std::size_t i = 0; i < count; ++i) m.add(unit_embedding(g, d), 1.0, "row" + std::to_string(i));
  return m;
}

inline long double dot(const Vec& a, const Vec& b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return s;
}

/// Index of the highest-similarity row by exhaustive scan; first wins ties.
inline std::size_t nearest(const Vec& query, const std::vector<Vec>& rows) {
  std::size_t best = 0;
  long double bs = dot(rows[0], query);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const long double s = dot(rows[i], query);
    if (s > bs) {
      bs = s;
      best = i;
    }
  }
  return best;
}

/// Full stable sort of row indices by descending similarity.
inline std::vector<std::size_t> ranking(const Vec& query, const std::vector<Vec>& rows) {
  std::vector<long double> s(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) s[i] = dot(rows[i], query);
  std::vector<std::size_t> idx(rows.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  return idx;
}

}  // namespace oracle

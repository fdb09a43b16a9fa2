// SPDX-License-Identifier: Apache-2.0
#include "decap/toy.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "decap/error.hpp"
#include "decap/rng.hpp"

namespace decap {
namespace {

// Locations are "<preposition> the <place>".
struct Place {
  const char* preposition;
  const char* noun;
};
constexpr Place kPlaces[] = {
    {"on", "table"}, {"on", "floor"}, {"in", "box"}, {"near", "wall"}, {"under", "chair"},
};

std::vector<double> unit_gaussian(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  const double n = l2_norm(v);
  for (double& x : v) x /= n;
  return v;
}

std::vector<double> mean_of(std::span<const Embedding> cloud) {
  std::vector<double> m(cloud.front().dim(), 0.0);
  for (const auto& e : cloud) {
    if (e.dim() != m.size()) throw Error(ErrorCode::kDimensionMismatch, "cloud dims differ");
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += e[j];
  }
  for (double& x : m) x /= static_cast<double>(cloud.size());
  return m;
}

}  // namespace

ToyWorld::ToyWorld(std::size_t dim, std::uint64_t seed)
    : dim_(dim),
      seed_(seed),
      colors_{"red", "blue", "green", "yellow", "purple", "orange", "black", "white"},
      shapes_{"cube", "sphere", "cylinder", "cone", "pyramid", "ring"} {
  if (dim < 2) throw Error(ErrorCode::kInvalidArgument, "toy world needs dim >= 2");
  for (const auto& p : kPlaces) locations_.push_back(std::string(p.preposition) + " the " + p.noun);
  Rng rng(mix_seed(seed, 0x746f79));
  const std::size_t n = colors_.size() + shapes_.size() + locations_.size();
  vectors_.reserve(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    auto v = unit_gaussian(rng, dim);
    vectors_.insert(vectors_.end(), v.begin(), v.end());
  }
}

std::span<const double> ToyWorld::color_vector(std::size_t i) const {
  return {vectors_.data() + i * dim_, dim_};
}
std::span<const double> ToyWorld::shape_vector(std::size_t i) const {
  return {vectors_.data() + (colors_.size() + i) * dim_, dim_};
}
std::span<const double> ToyWorld::location_vector(std::size_t i) const {
  return {vectors_.data() + (colors_.size() + shapes_.size() + i) * dim_, dim_};
}

ToyWorld::Attributes ToyWorld::parse(std::string_view caption) const {
  const auto words = split_words(caption);
  auto fail = [&] {
    return Error(ErrorCode::kUnparseableCaption, "'" + std::string(caption) + "'");
  };
  auto index_of = [](const std::vector<std::string>& list, const std::string& w) -> std::optional<std::size_t> {
    auto it = std::find(list.begin(), list.end(), w);
    if (it == list.end()) return std::nullopt;
    return static_cast<std::size_t>(it - list.begin());
  };

  std::size_t pos = 0;
  if (words.size() < 2 || words[pos++] != "a") throw fail();
  Attributes attrs;
  attrs.color = index_of(colors_, words[pos]);
  if (attrs.color) ++pos;
  if (pos >= words.size()) throw fail();
  auto shape = index_of(shapes_, words[pos++]);
  if (!shape) throw fail();
  attrs.shape = *shape;
  if (pos == words.size()) return attrs;
  if (words.size() - pos != 3) throw fail();
  attrs.location = index_of(locations_, words[pos] + " " + words[pos + 1] + " " + words[pos + 2]);
  if (!attrs.location) throw fail();
  return attrs;
}

std::string ToyWorld::render(const Attributes& attrs) const {
  std::string s = "a ";
  if (attrs.color) s += colors_.at(*attrs.color) + " ";
  s += shapes_.at(attrs.shape);
  if (attrs.location) s += " " + locations_.at(*attrs.location);
  return s;
}

std::vector<std::string> ToyWorld::captions(bool full_only) const {
  std::vector<std::string> out;
  const std::size_t nc = colors_.size(), nl = locations_.size();
  for (std::size_t c = 0; c <= nc; ++c) {
    for (std::size_t s = 0; s < shapes_.size(); ++s) {
      for (std::size_t l = 0; l <= nl; ++l) {
        Attributes a;
        if (c < nc) a.color = c;
        a.shape = s;
        if (l < nl) a.location = l;
        if (full_only && a.count() != 3) continue;
        out.push_back(render(a));
      }
    }
  }
  return out;
}

std::vector<std::string> ToyWorld::words() const {
  std::set<std::string> w{"a", "the"};
  w.insert(colors_.begin(), colors_.end());
  w.insert(shapes_.begin(), shapes_.end());
  for (const auto& p : kPlaces) {
    w.insert(p.preposition);
    w.insert(p.noun);
  }
  return {w.begin(), w.end()};
}

RawEmbedding ToyWorld::encode_text(std::string_view caption) const {
  const Attributes a = parse(caption);
  std::vector<double> v(dim_, 0.0);
  auto add = [&](std::span<const double> x) {
    for (std::size_t j = 0; j < dim_; ++j) v[j] += x[j];
  };
  if (a.color) add(color_vector(*a.color));
  add(shape_vector(a.shape));
  if (a.location) add(location_vector(*a.location));
  const double n = l2_norm(v);
  return {std::move(v), n};
}

void GapSpec::validate() const {
  if (!(rotation_angle >= 0.0 && rotation_angle <= std::numbers::pi)) {
    throw Error(ErrorCode::kInvalidArgument, "rotation_angle must be in [0, pi]");
  }
  if (!(offset_scale >= 0.0) || !(noise_sigma >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "offset_scale and noise_sigma must be >= 0");
  }
}

ToyImageEncoder::ToyImageEncoder(const ToyWorld& world, GapSpec gap) : world_(&world), gap_(gap) {
  gap_.validate();
  const std::size_t d = world.dim();
  Rng rng(mix_seed(gap.seed, 0x676170));
  // Gram-Schmidt on Gaussian rows gives a uniformly random orthonormal basis.
  basis_.assign(d * d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    double* row = basis_.data() + k * d;
    for (;;) {
      for (std::size_t j = 0; j < d; ++j) row[j] = rng.normal();
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* prev = basis_.data() + p * d;
          double c = 0.0;
          for (std::size_t j = 0; j < d; ++j) c += row[j] * prev[j];
          for (std::size_t j = 0; j < d; ++j) row[j] -= c * prev[j];
        }
      }
      const double n = l2_norm({row, d});
      if (n > 1e-8) {
        for (std::size_t j = 0; j < d; ++j) row[j] /= n;
        break;
      }
    }
  }
  offset_ = unit_gaussian(rng, d);
}

Normalized ToyImageEncoder::transform(const Embedding& text_embedding, std::uint64_t noise_seed) const {
  const std::size_t d = world_->dim();
  if (text_embedding.dim() != d) throw Error(ErrorCode::kDimensionMismatch, "image transform dim");
  const auto x = text_embedding.values();

  std::vector<double> coeff(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const double* row = basis_.data() + k * d;
    double c = 0.0;
    for (std::size_t j = 0; j < d; ++j) c += row[j] * x[j];
    coeff[k] = c;
  }
  const double cs = std::cos(gap_.rotation_angle), sn = std::sin(gap_.rotation_angle);
  for (std::size_t k = 0; k + 1 < d; k += 2) {
    const double a = coeff[k], b = coeff[k + 1];
    coeff[k] = cs * a - sn * b;
    coeff[k + 1] = sn * a + cs * b;
  }
  std::vector<double> y(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const double* row = basis_.data() + k * d;
    for (std::size_t j = 0; j < d; ++j) y[j] += coeff[k] * row[j];
  }
  for (std::size_t j = 0; j < d; ++j) y[j] += gap_.offset_scale * offset_[j];
  if (gap_.noise_sigma > 0.0) {
    Rng rng(mix_seed(gap_.seed, noise_seed));
    const double s = gap_.noise_sigma / std::sqrt(static_cast<double>(d));
    for (std::size_t j = 0; j < d; ++j) y[j] += s * rng.normal();
  }
  return normalize(y);
}

Normalized ToyImageEncoder::encode(std::string_view caption) const {
  const auto raw = world_->encode_text(caption);
  const auto text = normalize(raw.values);
  return transform(text.embedding, fnv1a(caption.data(), caption.size()));
}

double centroid_distance(std::span<const Embedding> a, std::span<const Embedding> b) {
  if (a.empty() || b.empty()) throw Error(ErrorCode::kEmptyInput, "empty cloud");
  const auto ma = mean_of(a), mb = mean_of(b);
  if (ma.size() != mb.size()) throw Error(ErrorCode::kDimensionMismatch, "cloud dims differ");
  double s = 0.0;
  for (std::size_t j = 0; j < ma.size(); ++j) s += (ma[j] - mb[j]) * (ma[j] - mb[j]);
  return std::sqrt(s);
}

double mean_paired_cosine(std::span<const Embedding> a, std::span<const Embedding> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kLengthMismatch, std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  if (a.empty()) throw Error(ErrorCode::kEmptyInput, "empty cloud");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += cosine(a[i], b[i]);
  return s / static_cast<double>(a.size());
}

GapReport gap_metrics(std::span<const Embedding> text_cloud, std::span<const Embedding> other_cloud) {
  return {centroid_distance(text_cloud, other_cloud), mean_paired_cosine(text_cloud, other_cloud)};
}

std::vector<Embedding> embeddings_of(const SupportMemory& memory) {
  std::vector<Embedding> out;
  out.reserve(memory.size());
  for (std::size_t i = 0; i < memory.size(); ++i) out.push_back(memory.embedding(i));
  return out;
}

}  // namespace decap

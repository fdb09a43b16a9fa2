// SPDX-License-Identifier: Apache-2.0
//
// Synthetic dual encoder. Captions come from a small templated grammar
//
//   a [color] <shape> [<preposition> the <place>]
//
// and the text encoder sums one fixed random unit vector per attribute. The
// paired "image" view is the text embedding pushed through a controllable
// modality gap (rotation, offset, noise), so the zero-shot mechanism can be
// exercised without a real contrastive model.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "decap/embedding.hpp"
#include "decap/memory.hpp"

namespace decap {

class ToyWorld {
 public:
  struct Attributes {
    std::optional<std::size_t> color;
    std::size_t shape = 0;
    std::optional<std::size_t> location;

    std::size_t count() const { return 1 + (color ? 1 : 0) + (location ? 1 : 0); }
    friend bool operator==(const Attributes&, const Attributes&) = default;
  };

  explicit ToyWorld(std::size_t dim = 16, std::uint64_t seed = 7);

  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t seed() const noexcept { return seed_; }

  const std::vector<std::string>& colors() const noexcept { return colors_; }
  const std::vector<std::string>& shapes() const noexcept { return shapes_; }
  const std::vector<std::string>& locations() const noexcept { return locations_; }

  /// Throws UnparseableCaption.
  Attributes parse(std::string_view caption) const;
  std::string render(const Attributes& attrs) const;

  /// Every caption the grammar can produce, in a fixed order. With
  /// `full_only`, only captions carrying all three attributes.
  std::vector<std::string> captions(bool full_only = false) const;
  /// Every word the grammar can emit, sorted.
  std::vector<std::string> words() const;

  /// Sum of the attribute vectors of the caption (pre-normalization).
  RawEmbedding encode_text(std::string_view caption) const;

  std::span<const double> color_vector(std::size_t i) const;
  std::span<const double> shape_vector(std::size_t i) const;
  std::span<const double> location_vector(std::size_t i) const;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
  std::vector<std::string> colors_, shapes_, locations_;
  std::vector<double> vectors_;  // colors, then shapes, then locations; dim_ each
};

/// TextEncoder adapter over a ToyWorld (the world must outlive it).
class ToyTextEncoder final : public TextEncoder {
 public:
  explicit ToyTextEncoder(const ToyWorld& world) : world_(&world) {}
  std::size_t dim() const override { return world_->dim(); }
  RawEmbedding encode(std::string_view text) const override { return world_->encode_text(text); }

 private:
  const ToyWorld* world_;
};

struct GapSpec {
  double rotation_angle = 0.0;  // radians, [0, pi]
  double offset_scale = 0.0;
  double noise_sigma = 0.0;     // expected l2 norm of the added noise
  std::uint64_t seed = 0;

  void validate() const;
};

/// Synthetic image encoder. The rotation turns every vector by exactly
/// `rotation_angle`: it rotates each coordinate pair of a seeded random
/// orthonormal basis. Then a fixed unit offset direction scaled by
/// `offset_scale` and per-caption Gaussian noise (per-component sigma /
/// sqrt(dim), seeded from the caption text) are added before re-normalizing.
class ToyImageEncoder {
 public:
  ToyImageEncoder(const ToyWorld& world, GapSpec gap);

  /// Throws UnparseableCaption.
  Normalized encode(std::string_view caption) const;
  /// The same transform applied to an arbitrary unit text embedding.
  Normalized transform(const Embedding& text_embedding, std::uint64_t noise_seed) const;

  const GapSpec& gap() const noexcept { return gap_; }
  std::span<const double> offset_direction() const noexcept { return offset_; }

 private:
  const ToyWorld* world_;
  GapSpec gap_;
  std::vector<double> basis_;  // dim x dim, row k is basis vector k
  std::vector<double> offset_;
};

/// l2 distance between the component-wise means of two clouds.
double centroid_distance(std::span<const Embedding> a, std::span<const Embedding> b);
/// Mean cosine over aligned pairs. Throws LengthMismatch.
double mean_paired_cosine(std::span<const Embedding> a, std::span<const Embedding> b);

struct GapReport {
  double centroid_distance = 0.0;
  double mean_paired_cosine = 0.0;
};

/// Throws EmptyInput, LengthMismatch.
GapReport gap_metrics(std::span<const Embedding> text_cloud, std::span<const Embedding> other_cloud);

std::vector<Embedding> embeddings_of(const SupportMemory& memory);

}  // namespace decap

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "aligndistill/tensor.hpp"

namespace aligndistill {

struct GridShape {
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t tokens() const { return h * w; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

// A grid of feature vectors stored as dims (h, w, k). Token (r, c) is row
// r * w + c of the flattened (h*w, k) view.
class FeatureGrid {
 public:
  FeatureGrid() = default;
  FeatureGrid(GridShape shape, std::size_t channels, double fill = 0.0);
  FeatureGrid(GridShape shape, Tensor values);  // values: (h, w, k) or (h*w, k)

  const GridShape& shape() const { return shape_; }
  std::size_t tokens() const { return shape_.tokens(); }
  std::size_t channels() const { return channels_; }

  std::span<double> token(std::size_t i) { return values_.data().subspan(i * channels_, channels_); }
  std::span<const double> token(std::size_t i) const {
    return values_.data().subspan(i * channels_, channels_);
  }
  double& at(std::size_t r, std::size_t c, std::size_t ch) {
    return values_[(r * shape_.w + c) * channels_ + ch];
  }
  double at(std::size_t r, std::size_t c, std::size_t ch) const {
    return values_[(r * shape_.w + c) * channels_ + ch];
  }

  const Tensor& values() const { return values_; }
  Tensor& values() { return values_; }
  // (h*w, k) copy, the layout the losses consume.
  Tensor token_matrix() const { return values_.reshaped({tokens(), channels_}); }
  // One channel as an (h, w) field.
  Tensor channel(std::size_t ch) const;

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;

 private:
  GridShape shape_{};
  std::size_t channels_ = 0;
  Tensor values_;
};

// Bilinear resampling of an (h, w) field with half-pixel centers and corner
// alignment off: output index i samples source coordinate
// (i + 0.5) * (in / out) - 0.5, clamped to [0, in - 1].
Tensor bilinear_resize(const Tensor& field, GridShape target);

// Per-channel bilinear resize followed by row l2 normalization.
FeatureGrid interpolate_features(const FeatureGrid& grid, GridShape target,
                                 NormalizeStats* stats = nullptr);

// Reshape a flat score vector onto `source`, resize to `target`, flatten.
// Scores are resized as-is; no renormalization.
std::vector<double> interpolate_attention(std::span<const double> scores, GridShape source,
                                          GridShape target);

}  // namespace aligndistill

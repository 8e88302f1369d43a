#include "aligndistill/interp.hpp"

#include <algorithm>
#include <stdexcept>

namespace aligndistill {

namespace {

struct Tap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0.0;  // weight of `hi`
};

std::vector<Tap> axis_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double last = static_cast<double>(in - 1);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, last);
    const auto lo = static_cast<std::size_t>(src);
    taps[i].lo = lo;
    taps[i].hi = std::min(lo + 1, in - 1);
    taps[i].frac = src - static_cast<double>(lo);
  }
  return taps;
}

double blend(double a, double b, double frac) {
  // frac == 0 returns `a` bit-for-bit, which makes equal-shape resizes exact.
  if (frac == 0.0) return a;
  return a * (1.0 - frac) + b * frac;
}

}  // namespace

FeatureGrid::FeatureGrid(GridShape shape, std::size_t channels, double fill)
    : shape_(shape), channels_(channels), values_({shape.h, shape.w, channels}, fill) {}

FeatureGrid::FeatureGrid(GridShape shape, Tensor values) : shape_(shape) {
  if (shape.h == 0 || shape.w == 0) throw std::invalid_argument("FeatureGrid: zero-sized grid");
  if (values.rank() == 3) {
    if (values.dims()[0] != shape.h || values.dims()[1] != shape.w)
      throw std::invalid_argument("FeatureGrid: values do not match grid shape");
  } else if (values.rank() == 2) {
    if (values.rows() != shape.tokens())
      throw std::invalid_argument("FeatureGrid: token count does not match grid shape");
  } else {
    throw std::invalid_argument("FeatureGrid: values must be rank 2 or 3");
  }
  channels_ = values.cols();
  values_ = values.reshaped({shape.h, shape.w, channels_});
}

Tensor FeatureGrid::channel(std::size_t ch) const {
  Tensor out = Tensor::matrix(shape_.h, shape_.w);
  for (std::size_t i = 0; i < tokens(); ++i) out[i] = values_[i * channels_ + ch];
  return out;
}

Tensor bilinear_resize(const Tensor& field, GridShape target) {
  if (field.rank() != 2) throw std::invalid_argument("bilinear_resize: field must be rank 2");
  if (target.h == 0 || target.w == 0) throw std::invalid_argument("bilinear_resize: zero-sized target");
  const std::size_t in_h = field.rows(), in_w = field.cols();
  const auto row_taps = axis_taps(in_h, target.h);
  const auto col_taps = axis_taps(in_w, target.w);

  Tensor out = Tensor::matrix(target.h, target.w);
  for (std::size_t i = 0; i < target.h; ++i) {
    const Tap& rt = row_taps[i];
    for (std::size_t j = 0; j < target.w; ++j) {
      const Tap& ct = col_taps[j];
      const double top = blend(field(rt.lo, ct.lo), field(rt.lo, ct.hi), ct.frac);
      const double bottom = blend(field(rt.hi, ct.lo), field(rt.hi, ct.hi), ct.frac);
      out(i, j) = blend(top, bottom, rt.frac);
    }
  }
  return out;
}

FeatureGrid interpolate_features(const FeatureGrid& grid, GridShape target, NormalizeStats* stats) {
  FeatureGrid resized(target, grid.channels());
  for (std::size_t ch = 0; ch < grid.channels(); ++ch) {
    const Tensor plane = bilinear_resize(grid.channel(ch), target);
    for (std::size_t t = 0; t < target.tokens(); ++t) resized.token(t)[ch] = plane[t];
  }
  return FeatureGrid(target, l2_normalize_rows(resized.values(), stats));
}

std::vector<double> interpolate_attention(std::span<const double> scores, GridShape source,
                                          GridShape target) {
  if (scores.size() != source.tokens())
    throw std::invalid_argument("interpolate_attention: length does not match source grid");
  const Tensor field({source.h, source.w}, std::vector<double>(scores.begin(), scores.end()));
  return bilinear_resize(field, target).values();
}

}  // namespace aligndistill

#pragma once

// Rotation + translation of images by bilinear interpolation, differentiable
// in both the pixels and the transform parameters.
//
// Units: tx, ty are fractions of the image width/height; theta is in radians,
// counter-clockwise as seen on screen (y axis pointing down), about the image
// center ((W-1)/2, (H-1)/2). Warping samples the source at G^-1 * v for every
// output coordinate v.

#include <array>
#include <span>
#include <vector>

#include "invreg/autodiff.hpp"
#include "invreg/rng.hpp"

namespace invreg {

struct TransformParams {
  double tx = 0.0;
  double ty = 0.0;
  double theta = 0.0;

  static TransformParams identity() { return {}; }
  std::array<double, 3> as_array() const { return {tx, ty, theta}; }
  static TransformParams from_array(std::span<const double> v) { return {v[0], v[1], v[2]}; }
  bool is_finite() const;
  friend bool operator==(const TransformParams&, const TransformParams&) = default;
};

/// Symmetric box (-half_range, half_range) of admissible transforms, closed.
class SearchSet {
 public:
  SearchSet() = default;
  explicit SearchSet(TransformParams half_range);

  const TransformParams& half_range() const { return half_; }
  bool contains(const TransformParams& delta) const;
  TransformParams project(const TransformParams& delta) const;
  TransformParams sample(Rng& rng) const;
  bool degenerate() const { return half_.tx == 0.0 && half_.ty == 0.0 && half_.theta == 0.0; }

 private:
  TransformParams half_;
};

SearchSet build_search_set(double max_rot_deg, double max_trans_px, std::size_t width, std::size_t height);

struct PaddingMode {
  enum class Kind { Constant, Reflect };
  Kind kind = Kind::Constant;
  double fill = 0.0;

  static PaddingMode constant(double fill = 0.0);
  static PaddingMode reflect() { return {Kind::Reflect, 0.0}; }
};

using Matrix3 = std::array<std::array<double, 3>, 3>;

/// Homogeneous forward coordinate map G: rotation about the center followed by
/// a translation of (tx*width, ty*height) pixels. Acts on (x, y, 1).
Matrix3 coord_matrix(const TransformParams& delta, std::size_t width, std::size_t height);

/// Warps `images` ([H,W,C] or [N,H,W,C]) by `params` ([3] shared by all images,
/// or [N,3] per image). Source coordinates within 1e-9 px of an integer are
/// snapped, so integer-aligned warps are exact pixel copies.
Tensor warp(Tape& tape, const Tensor& images, const Tensor& params, PaddingMode pad);

/// Convenience: builds an [N,3] parameter tensor.
Tensor params_tensor(std::span<const TransformParams> deltas, bool requires_grad = false);

/// Warps a batch without recording (each image by its own transform).
Tensor warp_batch(const Tensor& images, std::span<const TransformParams> deltas, PaddingMode pad);

/// Column reversal of [H,W,C] or [N,H,W,C] images.
Tensor flip_horizontal(const Tensor& images);

}  // namespace invreg

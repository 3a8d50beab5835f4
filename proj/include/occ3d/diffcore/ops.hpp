#pragma once

#include "occ3d/diffcore/tensor.hpp"

#include <span>

namespace occ3d::diff {
inline namespace OCC3D_DIFF_NS {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt_eps(const Tensor& a, Real eps);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// x [N x I] times w [I x O], plus optional bias [O].
Tensor matmul(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Column-wise concatenation of [N x a_i] blocks.
Tensor concat_cols(std::span<const Tensor> parts);
// [N x F] -> [N x 1]
Tensor row_sum(const Tensor& x);
// [N x 1] -> [N x F]
Tensor broadcast_cols(const Tensor& x, std::size_t width);
// x [G*n x F] plus y [G x F], y's row g added to the g-th block of n rows.
Tensor add_row_groups(const Tensor& x, const Tensor& y);

// NCHW convolution with zero padding ksize/2; stride 1 or 2. Bias optional.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride);
Tensor upsample_nearest2x(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
// [M x C x H x W] -> [M/group x C], mean over space and over each group of maps.
Tensor group_spatial_mean(const Tensor& maps, std::size_t group);

// maps [M x C x H x W], image index per query, uv [n x 2] pixel coordinates
// -> [n x C]. Coordinates are clamped to [0, W-1] x [0, H-1].
Tensor bilinear_sample(const Tensor& maps, std::span<const int> image, const Tensor& uv);

// Per-point rows arranged as ((group * views) + view) * points + point.
struct ViewLayout {
  std::size_t groups = 1;
  std::size_t views = 1;
  std::size_t points = 1;
  std::size_t rows() const { return groups * views * points; }
  std::size_t pooled_rows() const { return groups * points; }
};

// Weighted mean over views; weights has one entry per input row (1 keeps,
// 0 drops the view for that point). Every point needs a positive weight sum.
Tensor view_mean(const Tensor& g, const ViewLayout& layout, std::span<const Real> weights);
// Inverse layout broadcast of view_mean: [groups*points x F] -> [rows x F].
Tensor expand_views(const Tensor& pooled, const ViewLayout& layout);

// Feature-wise normalization over the rows of x [N x F] with no affine part.
struct BatchNormState {
  std::vector<Real> running_mean;
  std::vector<Real> running_var;
};
inline constexpr Real kNormEpsilon = Real(1e-5);
inline constexpr Real kNormMomentum = Real(0.9);
Tensor batch_norm(const Tensor& x, BatchNormState& state, bool training, Real momentum = kNormMomentum,
                  Real eps = kNormEpsilon);

// Per-row normalization over the features of x [N x F], no affine part.
Tensor layer_norm(const Tensor& x, Real eps = kNormEpsilon);

// Mean binary cross-entropy of probabilities against {0,1} labels with
// probabilities clamped to [clamp, 1 - clamp].
inline constexpr Real kProbClamp = Real(1e-7);
Tensor binary_cross_entropy(const Tensor& probs, std::span<const Real> labels, Real clamp = kProbClamp);

}  // namespace OCC3D_DIFF_NS
}  // namespace occ3d::diff

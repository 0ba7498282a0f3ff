#pragma once

#include <cstdint>
#include <vector>

#include "vloc/tensor.hpp"

// Differentiable primitives. Every op here provides an analytic gradient and
// is covered by the gradient-check suite. Binary elementwise ops accept a
// scalar (size-1) right operand and broadcast it.
namespace vloc::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor scalar_div(double c, const Tensor& a); // c / a, elementwise

Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// sqrt(sum(a^2)); gradient guarded near zero norm.
Tensor l2_norm(const Tensor& a);

Tensor reshape(const Tensor& a, std::vector<std::int64_t> shape);
Tensor transpose(const Tensor& a);              // 2-D
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len);
Tensor gather_rows(const Tensor& a, const std::vector<std::int64_t>& indices);

Tensor matmul(const Tensor& a, const Tensor& b); // (n,k)x(k,m)
Tensor add_rowvec(const Tensor& a, const Tensor& v); // (n,k) + broadcast (k)
Tensor mul_colvec(const Tensor& a, const Tensor& v); // (n,k) rows scaled by (n)

Tensor softmax_rows(const Tensor& a); // (n,m), softmax along each row

// Softmax over non-overlapping cell x cell windows of a (H,W) map.
Tensor cell_softmax(const Tensor& a, int cell);
// Expected absolute pixel coordinates (u,v) per cell under per-cell weights;
// rows ordered row-major over cells. Input is a (H,W) map of weights that
// sum to one within each cell.
Tensor cell_expected_coords(const Tensor& probs, int cell);

// x: (Cin,H,W); w: (Cout,Cin,kh,kw); b: (Cout) or undefined for no bias.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample_nearest2(const Tensor& x); // (C,H,W) -> (C,2H,2W)

// map: (C,H,W); coords: (N,2) as (u,v) in pixel units, clamped to the valid
// rectangle. Returns (N,C). Differentiable in both map and coords; the
// coordinate gradient is zero where clamping is active.
Tensor bilinear_sample(const Tensor& map, const Tensor& coords);

// Zero-normalized cross correlation between descriptor rows, in [-1,1].
// Rows with (numerically) zero variance correlate to 0 with zero gradient.
Tensor zncc_matrix(const Tensor& a, const Tensor& b); // (N,D),(M,D) -> (N,M)
Tensor zncc_pairs(const Tensor& a, const Tensor& b);  // (N,D),(N,D) -> (N)

// Orthogonal-Procrustes rotation from a 3x3 cross-covariance: R = V D U^T
// with S = U Sigma V^T and D = diag(1,1,det(VU^T)). Raises DegenerateError on
// rank-deficient S, or on (near-)equal singular values when gradients are
// required, since the SVD gradient is unstable there.
Tensor procrustes_rotation(const Tensor& s);

} // namespace vloc::ops

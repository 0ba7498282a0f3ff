#pragma once

#include <Eigen/Core>

#include "vloc/tensor.hpp"

namespace vloc {

// Left-image observation of a rectified stereo pair: sub-pixel pixel
// coordinates plus disparity d = u_l - u_r (pixels, > 0 for finite depth).
struct ImageObservation {
  double u = 0.0;
  double v = 0.0;
  double d = 0.0;
};

// Pinhole stereo model. Maps camera-frame points to (u_l, v_l, d) and back;
// both directions are also available on tensors for training graphs.
struct StereoCamera {
  double fu = 0.0, fv = 0.0; // focal lengths, pixels
  double cu = 0.0, cv = 0.0; // principal point, pixels
  double b = 0.0;            // baseline, meters
  int width = 0, height = 0;

  static constexpr double kMinDisparity = 0.1; // pixels

  void validate() const; // throws ShapeError on out-of-range intrinsics

  // u = fu x/z + cu, v = fv y/z + cv, d = fu b / z. Throws DegenerateError
  // for z <= 0 (point behind the camera).
  ImageObservation project(const Eigen::Vector3d& p) const;

  // p = (b/d) [u - cu, (fu/fv)(v - cv), fu]. Throws DegenerateError for
  // d <= min_disparity.
  Eigen::Vector3d backproject(const ImageObservation& y,
                              double min_disparity = kMinDisparity) const;

  bool in_bounds(double u, double v) const {
    return u >= 0.0 && v >= 0.0 && u <= width - 1.0 && v <= height - 1.0;
  }
};

// Differentiable counterparts operating on column tensors.
// points: (N,3) camera-frame coordinates with z > 0 -> (N,3) as (u,v,d).
Tensor project_tensor(const Tensor& points, const StereoCamera& cam);
// coords: (N,2) as (u,v); disparity: (N) -> (N,3) camera-frame points.
Tensor backproject_tensor(const Tensor& coords, const Tensor& disparity, const StereoCamera& cam);

} // namespace vloc

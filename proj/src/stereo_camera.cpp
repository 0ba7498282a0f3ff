#include "vloc/stereo_camera.hpp"

#include "vloc/errors.hpp"
#include "vloc/ops.hpp"

namespace vloc {

void StereoCamera::validate() const {
  if (fu <= 0.0 || fv <= 0.0 || b <= 0.0)
    throw ShapeError("StereoCamera: focal lengths and baseline must be positive");
  if (width <= 0 || height <= 0) throw ShapeError("StereoCamera: image extents must be positive");
  if (cu < 0.0 || cu >= width || cv < 0.0 || cv >= height)
    throw ShapeError("StereoCamera: principal point outside the image");
}

ImageObservation StereoCamera::project(const Eigen::Vector3d& p) const {
  if (p.z() <= 0.0) throw DegenerateError("StereoCamera::project: point behind camera (z <= 0)");
  ImageObservation y;
  y.u = fu * p.x() / p.z() + cu;
  y.v = fv * p.y() / p.z() + cv;
  y.d = fu * b / p.z();
  return y;
}

Eigen::Vector3d StereoCamera::backproject(const ImageObservation& y, double min_disparity) const {
  if (y.d <= min_disparity)
    throw DegenerateError("StereoCamera::backproject: disparity at or below floor");
  const double s = b / y.d;
  return {s * (y.u - cu), s * (fu / fv) * (y.v - cv), s * fu};
}

Tensor project_tensor(const Tensor& points, const StereoCamera& cam) {
  namespace o = ops;
  if (points.ndim() != 2 || points.dim(1) != 3)
    throw ShapeError("project_tensor: expected (N,3) points");
  const std::int64_t n = points.dim(0);
  for (std::int64_t i = 0; i < n; ++i)
    if (points.at(i * 3 + 2) <= 0.0)
      throw DegenerateError("project_tensor: point behind camera (z <= 0)");
  Tensor x = o::slice(points, 1, 0, 1);
  Tensor y = o::slice(points, 1, 1, 1);
  Tensor z = o::slice(points, 1, 2, 1);
  Tensor u = o::add_scalar(o::mul_scalar(o::div(x, z), cam.fu), cam.cu);
  Tensor v = o::add_scalar(o::mul_scalar(o::div(y, z), cam.fv), cam.cv);
  Tensor d = o::scalar_div(cam.fu * cam.b, z);
  return o::concat({u, v, d}, 1);
}

Tensor backproject_tensor(const Tensor& coords, const Tensor& disparity, const StereoCamera& cam) {
  namespace o = ops;
  if (coords.ndim() != 2 || coords.dim(1) != 2)
    throw ShapeError("backproject_tensor: expected (N,2) coords");
  const std::int64_t n = coords.dim(0);
  if (disparity.size() != n) throw ShapeError("backproject_tensor: disparity length mismatch");
  for (std::int64_t i = 0; i < n; ++i)
    if (disparity.at(i) <= StereoCamera::kMinDisparity)
      throw DegenerateError("backproject_tensor: disparity at or below floor");
  Tensor d = o::reshape(disparity, {n, 1});
  Tensor scale = o::scalar_div(cam.b, d); // b/d per row
  Tensor u = o::slice(coords, 1, 0, 1);
  Tensor v = o::slice(coords, 1, 1, 1);
  Tensor x = o::mul(o::add_scalar(u, -cam.cu), scale);
  Tensor y = o::mul_scalar(o::mul(o::add_scalar(v, -cam.cv), scale), cam.fu / cam.fv);
  Tensor z = o::mul_scalar(scale, cam.fu);
  return o::concat({x, y, z}, 1);
}

} // namespace vloc

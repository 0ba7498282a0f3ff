#include "vloc/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>

namespace vloc::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

[[noreturn]] void shape_fail(const std::string& op, const std::string& detail) {
  throw ShapeError(op + ": " + detail);
}

void check_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, "operand shapes differ");
}

bool scalar_rhs(const Tensor& b) { return b.size() == 1; }

// Shared skeleton of the four elementwise binaries with scalar broadcast on
// the right operand.
template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const std::string& name, const Tensor& a, const Tensor& b, Fwd fwd,
                 BwdA bwd_a, BwdB bwd_b) {
  const bool bc = scalar_rhs(b) && a.size() != 1;
  if (!bc) check_same_shape(name, a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[bc ? 0 : i]);
  return make_op(a.shape(), std::move(out), {a, b}, [=](detail::Node& self) {
    const auto& g = self.grad;
    const auto& av2 = a.values();
    const auto& bv2 = b.values();
    if (a.requires_grad()) {
      auto& ga = a.node()->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += bwd_a(g[i], av2[i], bv2[bc ? 0 : i]);
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i)
        gb[bc ? 0 : i] += bwd_b(g[i], av2[i], bv2[bc ? 0 : i]);
    }
  });
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd_from_out) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_op(a.shape(), std::move(out), {a}, [=](detail::Node& self) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_ref();
    const auto& g = self.grad;
    const auto& av2 = a.values();
    const auto& yv = self.values;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += bwd_from_out(g[i], av2[i], yv[i]);
  });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x + c; }, [](double g, double, double) { return g; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x * c; }, [c](double g, double, double) { return g * c; });
}

Tensor scalar_div(double c, const Tensor& a) {
  return unary_op(
      a, [c](double x) { return c / x; },
      [c](double g, double x, double) { return -g * c / (x * x); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); }, [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); }, [](double g, double x, double) { return g / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double g, double, double y) { return 0.5 * g / y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op({}, {s}, {a}, [a](detail::Node& self) {
    if (!a.requires_grad()) return;
    const double g = self.grad[0];
    auto& ga = a.node()->grad_ref();
    for (auto& v : ga) v += g;
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op({}, {s / n}, {a}, [a, n](detail::Node& self) {
    if (!a.requires_grad()) return;
    const double g = self.grad[0] / n;
    auto& ga = a.node()->grad_ref();
    for (auto& v : ga) v += g;
  });
}

Tensor l2_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  const double norm = std::sqrt(s);
  return make_op({}, {norm}, {a}, [a, norm](detail::Node& self) {
    if (!a.requires_grad()) return;
    const double g = self.grad[0];
    const double denom = std::max(norm, 1e-300);
    auto& ga = a.node()->grad_ref();
    const auto& av = a.values();
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * av[i] / denom;
  });
}

Tensor reshape(const Tensor& a, std::vector<std::int64_t> shape) {
  if (numel(shape) != a.size()) shape_fail("reshape", "element count mismatch");
  std::vector<double> out = a.values();
  return make_op(std::move(shape), std::move(out), {a}, [a](detail::Node& self) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_ref();
    const auto& g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) shape_fail("transpose", "expected a 2-D tensor");
  const std::int64_t n = a.dim(0), m = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n * m));
  MapConst src(a.values().data(), n, m);
  MapMat(out.data(), m, n) = src.transpose();
  return make_op({m, n}, std::move(out), {a}, [a, n, m](detail::Node& self) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_ref();
    MapConst g(self.grad.data(), m, n);
    MapMat(ga.data(), n, m) += g.transpose();
  });
}

namespace {

// outer/inner strides around `axis` for slice/concat.
struct AxisSplit {
  std::int64_t outer = 1, axis = 1, inner = 1;
};

AxisSplit split_shape(const std::vector<std::int64_t>& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i < axis) s.outer *= shape[i];
    else if (i == axis) s.axis = shape[i];
    else s.inner *= shape[i];
  }
  return s;
}

} // namespace

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const int nd = parts[0].ndim();
  if (axis < 0 || axis >= nd) shape_fail("concat", "axis out of range");
  std::vector<std::int64_t> shape = parts[0].shape();
  std::int64_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) shape_fail("concat", "rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && p.dim(i) != shape[static_cast<std::size_t>(i)])
        shape_fail("concat", "non-axis extents differ");
    total_axis += p.dim(axis);
  }
  shape[static_cast<std::size_t>(axis)] = total_axis;
  const AxisSplit sp = split_shape(shape, axis);
  std::vector<double> out(static_cast<std::size_t>(numel(shape)));
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t pa = p.dim(axis);
    const auto& pv = p.values();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      const double* src = pv.data() + o * pa * sp.inner;
      double* dst = out.data() + (o * total_axis + offset) * sp.inner;
      std::copy(src, src + pa * sp.inner, dst);
    }
    offset += pa;
  }
  return make_op(shape, std::move(out), parts, [parts, sp, total_axis, axis](detail::Node& self) {
    std::int64_t off = 0;
    for (const auto& p : parts) {
      const std::int64_t pa = p.dim(axis);
      if (p.requires_grad()) {
        auto& gp = p.node()->grad_ref();
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          const double* src = self.grad.data() + (o * total_axis + off) * sp.inner;
          double* dst = gp.data() + o * pa * sp.inner;
          for (std::int64_t i = 0; i < pa * sp.inner; ++i) dst[i] += src[i];
        }
      }
      off += pa;
    }
  });
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
  if (axis < 0 || axis >= a.ndim()) shape_fail("slice", "axis out of range");
  if (start < 0 || len < 0 || start + len > a.dim(axis)) shape_fail("slice", "range out of bounds");
  std::vector<std::int64_t> shape = a.shape();
  shape[static_cast<std::size_t>(axis)] = len;
  const AxisSplit sp = split_shape(a.shape(), axis);
  std::vector<double> out(static_cast<std::size_t>(numel(shape)));
  const auto& av = a.values();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    const double* src = av.data() + (o * sp.axis + start) * sp.inner;
    std::copy(src, src + len * sp.inner, out.data() + o * len * sp.inner);
  }
  return make_op(shape, std::move(out), {a}, [a, sp, start, len](detail::Node& self) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_ref();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      const double* src = self.grad.data() + o * len * sp.inner;
      double* dst = ga.data() + (o * sp.axis + start) * sp.inner;
      for (std::int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor gather_rows(const Tensor& a, const std::vector<std::int64_t>& indices) {
  if (a.ndim() < 1) shape_fail("gather_rows", "input has no rows");
  const std::int64_t rows = a.dim(0);
  const std::int64_t rowsz = a.size() / std::max<std::int64_t>(rows, 1);
  for (auto i : indices)
    if (i < 0 || i >= rows) shape_fail("gather_rows", "index out of range");
  std::vector<std::int64_t> shape = a.shape();
  shape[0] = static_cast<std::int64_t>(indices.size());
  std::vector<double> out(static_cast<std::size_t>(shape[0] * rowsz));
  const auto& av = a.values();
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy(av.data() + indices[r] * rowsz, av.data() + (indices[r] + 1) * rowsz,
              out.data() + static_cast<std::int64_t>(r) * rowsz);
  return make_op(std::move(shape), std::move(out), {a}, [a, indices, rowsz](detail::Node& self) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_ref();
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const double* src = self.grad.data() + static_cast<std::int64_t>(r) * rowsz;
      double* dst = ga.data() + indices[r] * rowsz;
      for (std::int64_t i = 0; i < rowsz; ++i) dst[i] += src[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    shape_fail("matmul", "incompatible operand shapes");
  const std::int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n * m));
  MapMat(out.data(), n, m).noalias() =
      MapConst(a.values().data(), n, k) * MapConst(b.values().data(), k, m);
  return make_op({n, m}, std::move(out), {a, b}, [a, b, n, k, m](detail::Node& self) {
    MapConst g(self.grad.data(), n, m);
    if (a.requires_grad()) {
      MapMat ga(a.node()->grad_ref().data(), n, k);
      ga.noalias() += g * MapConst(b.values().data(), k, m).transpose();
    }
    if (b.requires_grad()) {
      MapMat gb(b.node()->grad_ref().data(), k, m);
      gb.noalias() += MapConst(a.values().data(), n, k).transpose() * g;
    }
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (a.ndim() != 2) shape_fail("add_rowvec", "matrix operand must be 2-D");
  const std::int64_t n = a.dim(0), k = a.dim(1);
  if (v.size() != k) shape_fail("add_rowvec", "vector length mismatch");
  std::vector<double> out(static_cast<std::size_t>(n * k));
  const auto& av = a.values();
  const auto& vv = v.values();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < k; ++j) out[i * k + j] = av[i * k + j] + vv[j];
  return make_op(a.shape(), std::move(out), {a, v}, [a, v, n, k](detail::Node& self) {
    const auto& g = self.grad;
    if (a.requires_grad()) {
      auto& ga = a.node()->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (v.requires_grad()) {
      auto& gv = v.node()->grad_ref();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < k; ++j) gv[j] += g[i * k + j];
    }
  });
}

Tensor mul_colvec(const Tensor& a, const Tensor& v) {
  if (a.ndim() != 2) shape_fail("mul_colvec", "matrix operand must be 2-D");
  const std::int64_t n = a.dim(0), k = a.dim(1);
  if (v.size() != n) shape_fail("mul_colvec", "vector length mismatch");
  std::vector<double> out(static_cast<std::size_t>(n * k));
  const auto& av = a.values();
  const auto& vv = v.values();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < k; ++j) out[i * k + j] = av[i * k + j] * vv[i];
  return make_op(a.shape(), std::move(out), {a, v}, [a, v, n, k](detail::Node& self) {
    const auto& g = self.grad;
    const auto& av2 = a.values();
    const auto& vv2 = v.values();
    if (a.requires_grad()) {
      auto& ga = a.node()->grad_ref();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < k; ++j) ga[i * k + j] += g[i * k + j] * vv2[i];
    }
    if (v.requires_grad()) {
      auto& gv = v.node()->grad_ref();
      for (std::int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::int64_t j = 0; j < k; ++j) s += g[i * k + j] * av2[i * k + j];
        gv[i] += s;
      }
    }
  });
}

namespace {

void softmax_span(const double* x, double* y, std::int64_t n) {
  double mx = x[0];
  for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    s += y[i];
  }
  for (std::int64_t i = 0; i < n; ++i) y[i] /= s;
}

void softmax_span_backward(const double* y, const double* g, double* gx, std::int64_t n) {
  double dot = 0.0;
  for (std::int64_t i = 0; i < n; ++i) dot += y[i] * g[i];
  for (std::int64_t i = 0; i < n; ++i) gx[i] += y[i] * (g[i] - dot);
}

} // namespace

Tensor softmax_rows(const Tensor& a) {
  if (a.ndim() != 2) shape_fail("softmax_rows", "expected a 2-D tensor");
  const std::int64_t n = a.dim(0), m = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n * m));
  const auto& av = a.values();
  for (std::int64_t i = 0; i < n; ++i) softmax_span(av.data() + i * m, out.data() + i * m, m);
  return make_op(a.shape(), std::move(out), {a}, [a, n, m](detail::Node& self) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_ref();
    for (std::int64_t i = 0; i < n; ++i)
      softmax_span_backward(self.values.data() + i * m, self.grad.data() + i * m,
                            ga.data() + i * m, m);
  });
}

Tensor cell_softmax(const Tensor& a, int cell) {
  if (a.ndim() != 2) shape_fail("cell_softmax", "expected a (H,W) map");
  const std::int64_t h = a.dim(0), w = a.dim(1);
  if (cell <= 0 || h % cell != 0 || w % cell != 0)
    shape_fail("cell_softmax", "map extents not divisible by cell size");
  const std::int64_t ch = h / cell, cw = w / cell, win = static_cast<std::int64_t>(cell) * cell;
  std::vector<double> out(static_cast<std::size_t>(h * w));
  const auto& av = a.values();
  std::vector<double> buf(static_cast<std::size_t>(win)), sbuf(static_cast<std::size_t>(win));
  for (std::int64_t cy = 0; cy < ch; ++cy)
    for (std::int64_t cx = 0; cx < cw; ++cx) {
      std::int64_t k = 0;
      for (int dy = 0; dy < cell; ++dy)
        for (int dx = 0; dx < cell; ++dx)
          buf[k++] = av[(cy * cell + dy) * w + cx * cell + dx];
      softmax_span(buf.data(), sbuf.data(), win);
      k = 0;
      for (int dy = 0; dy < cell; ++dy)
        for (int dx = 0; dx < cell; ++dx)
          out[(cy * cell + dy) * w + cx * cell + dx] = sbuf[k++];
    }
  return make_op(a.shape(), std::move(out), {a}, [a, h, w, cell](detail::Node& self) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_ref();
    const std::int64_t ch = h / cell, cw = w / cell, win = static_cast<std::int64_t>(cell) * cell;
    std::vector<double> y(static_cast<std::size_t>(win)), g(static_cast<std::size_t>(win)),
        gx(static_cast<std::size_t>(win));
    for (std::int64_t cy = 0; cy < ch; ++cy)
      for (std::int64_t cx = 0; cx < cw; ++cx) {
        std::int64_t k = 0;
        for (int dy = 0; dy < cell; ++dy)
          for (int dx = 0; dx < cell; ++dx) {
            const std::int64_t idx = (cy * cell + dy) * w + cx * cell + dx;
            y[k] = self.values[idx];
            g[k] = self.grad[idx];
            ++k;
          }
        std::fill(gx.begin(), gx.end(), 0.0);
        softmax_span_backward(y.data(), g.data(), gx.data(), win);
        k = 0;
        for (int dy = 0; dy < cell; ++dy)
          for (int dx = 0; dx < cell; ++dx)
            ga[(cy * cell + dy) * w + cx * cell + dx] += gx[k++];
      }
  });
}

Tensor cell_expected_coords(const Tensor& probs, int cell) {
  if (probs.ndim() != 2) shape_fail("cell_expected_coords", "expected a (H,W) map");
  const std::int64_t h = probs.dim(0), w = probs.dim(1);
  if (cell <= 0 || h % cell != 0 || w % cell != 0)
    shape_fail("cell_expected_coords", "map extents not divisible by cell size");
  const std::int64_t ch = h / cell, cw = w / cell, n = ch * cw;
  std::vector<double> out(static_cast<std::size_t>(n * 2), 0.0);
  const auto& pv = probs.values();
  for (std::int64_t cy = 0; cy < ch; ++cy)
    for (std::int64_t cx = 0; cx < cw; ++cx) {
      double eu = 0.0, ev = 0.0;
      for (int dy = 0; dy < cell; ++dy)
        for (int dx = 0; dx < cell; ++dx) {
          const double p = pv[(cy * cell + dy) * w + cx * cell + dx];
          eu += p * static_cast<double>(cx * cell + dx);
          ev += p * static_cast<double>(cy * cell + dy);
        }
      out[(cy * cw + cx) * 2 + 0] = eu;
      out[(cy * cw + cx) * 2 + 1] = ev;
    }
  return make_op({n, 2}, std::move(out), {probs}, [probs, h, w, cell](detail::Node& self) {
    if (!probs.requires_grad()) return;
    auto& gp = probs.node()->grad_ref();
    const std::int64_t ch = h / cell, cw = w / cell;
    for (std::int64_t cy = 0; cy < ch; ++cy)
      for (std::int64_t cx = 0; cx < cw; ++cx) {
        const double gu = self.grad[(cy * cw + cx) * 2 + 0];
        const double gv = self.grad[(cy * cw + cx) * 2 + 1];
        for (int dy = 0; dy < cell; ++dy)
          for (int dx = 0; dx < cell; ++dx)
            gp[(cy * cell + dy) * w + cx * cell + dx] +=
                gu * static_cast<double>(cx * cell + dx) + gv * static_cast<double>(cy * cell + dy);
      }
  });
}

namespace {

struct ConvDims {
  std::int64_t cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.ndim() != 3 || w.ndim() != 4) throw ShapeError("conv2d: expected (C,H,W) and (O,C,kh,kw)");
  ConvDims d{};
  d.cin = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  if (w.dim(1) != d.cin) throw ShapeError("conv2d: kernel input channels mismatch");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride/pad");
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.ho <= 0 || d.wo <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  return d;
}

void im2col(const double* x, const ConvDims& d, double* cols) {
  // cols is (cin*kh*kw) x (ho*wo), row-major
  const std::int64_t npix = d.ho * d.wo;
  for (std::int64_t ci = 0; ci < d.cin; ++ci)
    for (std::int64_t ky = 0; ky < d.kh; ++ky)
      for (std::int64_t kx = 0; kx < d.kw; ++kx) {
        double* row = cols + ((ci * d.kh + ky) * d.kw + kx) * npix;
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * d.stride - d.pad + ky;
          double* out = row + oy * d.wo;
          if (iy < 0 || iy >= d.h) {
            std::fill(out, out + d.wo, 0.0);
            continue;
          }
          const double* src = x + (ci * d.h + iy) * d.w;
          for (std::int64_t ox = 0; ox < d.wo; ++ox) {
            const std::int64_t ix = ox * d.stride - d.pad + kx;
            out[ox] = (ix >= 0 && ix < d.w) ? src[ix] : 0.0;
          }
        }
      }
}

void col2im_accumulate(const double* cols, const ConvDims& d, double* gx) {
  const std::int64_t npix = d.ho * d.wo;
  for (std::int64_t ci = 0; ci < d.cin; ++ci)
    for (std::int64_t ky = 0; ky < d.kh; ++ky)
      for (std::int64_t kx = 0; kx < d.kw; ++kx) {
        const double* row = cols + ((ci * d.kh + ky) * d.kw + kx) * npix;
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          double* dst = gx + (ci * d.h + iy) * d.w;
          const double* src = row + oy * d.wo;
          for (std::int64_t ox = 0; ox < d.wo; ++ox) {
            const std::int64_t ix = ox * d.stride - d.pad + kx;
            if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
          }
        }
      }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const ConvDims d = conv_dims(x, w, stride, pad);
  const bool has_bias = b.defined();
  if (has_bias && b.size() != d.cout) throw ShapeError("conv2d: bias length mismatch");
  const std::int64_t npix = d.ho * d.wo, krows = d.cin * d.kh * d.kw;
  const bool pointwise = (d.kh == 1 && d.kw == 1 && stride == 1 && pad == 0);

  std::vector<double> out(static_cast<std::size_t>(d.cout * npix));
  {
    MapMat y(out.data(), d.cout, npix);
    MapConst wm(w.values().data(), d.cout, krows);
    if (pointwise) {
      y.noalias() = wm * MapConst(x.values().data(), krows, npix);
    } else {
      std::vector<double> cols(static_cast<std::size_t>(krows * npix));
      im2col(x.values().data(), d, cols.data());
      y.noalias() = wm * MapConst(cols.data(), krows, npix);
    }
    if (has_bias) {
      const auto& bv = b.values();
      for (std::int64_t co = 0; co < d.cout; ++co) y.row(co).array() += bv[co];
    }
  }

  std::vector<Tensor> parents = has_bias ? std::vector<Tensor>{x, w, b} : std::vector<Tensor>{x, w};
  return make_op({d.cout, d.ho, d.wo}, std::move(out), std::move(parents),
                 [x, w, b, d, has_bias, npix, krows, pointwise](detail::Node& self) {
                   MapConst g(self.grad.data(), d.cout, npix);
                   if (has_bias && b.requires_grad()) {
                     auto& gb = b.node()->grad_ref();
                     for (std::int64_t co = 0; co < d.cout; ++co) gb[co] += g.row(co).sum();
                   }
                   if (pointwise) {
                     if (w.requires_grad()) {
                       MapMat gw(w.node()->grad_ref().data(), d.cout, krows);
                       gw.noalias() += g * MapConst(x.values().data(), krows, npix).transpose();
                     }
                     if (x.requires_grad()) {
                       MapMat gx(x.node()->grad_ref().data(), krows, npix);
                       gx.noalias() +=
                           MapConst(w.values().data(), d.cout, krows).transpose() * g;
                     }
                     return;
                   }
                   if (w.requires_grad()) {
                     std::vector<double> cols(static_cast<std::size_t>(krows * npix));
                     im2col(x.values().data(), d, cols.data());
                     MapMat gw(w.node()->grad_ref().data(), d.cout, krows);
                     gw.noalias() += g * MapConst(cols.data(), krows, npix).transpose();
                   }
                   if (x.requires_grad()) {
                     std::vector<double> gcols(static_cast<std::size_t>(krows * npix));
                     MapMat(gcols.data(), krows, npix).noalias() =
                         MapConst(w.values().data(), d.cout, krows).transpose() * g;
                     col2im_accumulate(gcols.data(), d, x.node()->grad_ref().data());
                   }
                 });
}

Tensor upsample_nearest2(const Tensor& x) {
  if (x.ndim() != 3) shape_fail("upsample_nearest2", "expected a (C,H,W) tensor");
  const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> out(static_cast<std::size_t>(c * 4 * h * w));
  const auto& xv = x.values();
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t y = 0; y < 2 * h; ++y) {
      const double* src = xv.data() + (ci * h + y / 2) * w;
      double* dst = out.data() + (ci * 2 * h + y) * 2 * w;
      for (std::int64_t xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
    }
  return make_op({c, 2 * h, 2 * w}, std::move(out), {x}, [x, c, h, w](detail::Node& self) {
    if (!x.requires_grad()) return;
    auto& gx = x.node()->grad_ref();
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t y = 0; y < 2 * h; ++y) {
        const double* src = self.grad.data() + (ci * 2 * h + y) * 2 * w;
        double* dst = gx.data() + (ci * h + y / 2) * w;
        for (std::int64_t xx = 0; xx < 2 * w; ++xx) dst[xx / 2] += src[xx];
      }
  });
}

Tensor bilinear_sample(const Tensor& map, const Tensor& coords) {
  if (map.ndim() != 3) shape_fail("bilinear_sample", "map must be (C,H,W)");
  if (coords.ndim() != 2 || coords.dim(1) != 2)
    shape_fail("bilinear_sample", "coords must be (N,2)");
  const std::int64_t c = map.dim(0), h = map.dim(1), w = map.dim(2), n = coords.dim(0);
  if (h < 2 || w < 2) shape_fail("bilinear_sample", "map too small");

  struct Corner {
    std::int64_t x0, y0;
    double fx, fy;
    bool clamp_u, clamp_v;
  };
  std::vector<Corner> cs(static_cast<std::size_t>(n));
  const auto& cv = coords.values();
  for (std::int64_t i = 0; i < n; ++i) {
    double u = cv[i * 2 + 0], v = cv[i * 2 + 1];
    Corner k{};
    k.clamp_u = (u <= 0.0 || u >= static_cast<double>(w - 1));
    k.clamp_v = (v <= 0.0 || v >= static_cast<double>(h - 1));
    u = std::clamp(u, 0.0, static_cast<double>(w - 1));
    v = std::clamp(v, 0.0, static_cast<double>(h - 1));
    k.x0 = std::min(static_cast<std::int64_t>(u), w - 2);
    k.y0 = std::min(static_cast<std::int64_t>(v), h - 2);
    k.fx = u - static_cast<double>(k.x0);
    k.fy = v - static_cast<double>(k.y0);
    cs[static_cast<std::size_t>(i)] = k;
  }

  std::vector<double> out(static_cast<std::size_t>(n * c));
  const auto& mv = map.values();
  for (std::int64_t i = 0; i < n; ++i) {
    const Corner& k = cs[static_cast<std::size_t>(i)];
    const double w00 = (1 - k.fx) * (1 - k.fy), w01 = k.fx * (1 - k.fy);
    const double w10 = (1 - k.fx) * k.fy, w11 = k.fx * k.fy;
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const double* m = mv.data() + (ci * h + k.y0) * w + k.x0;
      out[i * c + ci] = w00 * m[0] + w01 * m[1] + w10 * m[w] + w11 * m[w + 1];
    }
  }
  return make_op({n, c}, std::move(out), {map, coords}, [map, coords, cs, c, h, w, n](detail::Node& self) {
    const auto& g = self.grad;
    const auto& mv = map.values();
    double* gm = map.requires_grad() ? map.node()->grad_ref().data() : nullptr;
    double* gc = coords.requires_grad() ? coords.node()->grad_ref().data() : nullptr;
    for (std::int64_t i = 0; i < n; ++i) {
      const Corner& k = cs[static_cast<std::size_t>(i)];
      const double w00 = (1 - k.fx) * (1 - k.fy), w01 = k.fx * (1 - k.fy);
      const double w10 = (1 - k.fx) * k.fy, w11 = k.fx * k.fy;
      double du = 0.0, dv = 0.0;
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const double gi = g[i * c + ci];
        const std::int64_t base = (ci * h + k.y0) * w + k.x0;
        if (gm) {
          gm[base] += gi * w00;
          gm[base + 1] += gi * w01;
          gm[base + w] += gi * w10;
          gm[base + w + 1] += gi * w11;
        }
        if (gc) {
          const double m00 = mv[base], m01 = mv[base + 1], m10 = mv[base + w],
                       m11 = mv[base + w + 1];
          du += gi * ((1 - k.fy) * (m01 - m00) + k.fy * (m11 - m10));
          dv += gi * ((1 - k.fx) * (m10 - m00) + k.fx * (m11 - m01));
        }
      }
      if (gc) {
        if (!k.clamp_u) gc[i * 2 + 0] += du;
        if (!k.clamp_v) gc[i * 2 + 1] += dv;
      }
    }
  });
}

namespace {

constexpr double kZnccVarEps = 1e-12;

// Row-wise z-scores; rows with ~zero variance come out as all-zero and are
// flagged so their gradient stays zero.
void zscore_rows(const double* x, std::int64_t n, std::int64_t d, double* z, double* sigma,
                 std::vector<char>& constant) {
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = x + i * d;
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double u = row[j] - mean;
      var += u * u;
    }
    var /= static_cast<double>(d);
    if (var < kZnccVarEps) {
      constant[static_cast<std::size_t>(i)] = 1;
      sigma[i] = 1.0;
      std::fill(z + i * d, z + (i + 1) * d, 0.0);
      continue;
    }
    constant[static_cast<std::size_t>(i)] = 0;
    const double s = std::sqrt(var);
    sigma[i] = s;
    for (std::int64_t j = 0; j < d; ++j) z[i * d + j] = (row[j] - mean) / s;
  }
}

// Chain rule through one row's z-score: gz is dL/dz, result accumulated into
// gx (dL/dx). u = x - mean(x), sigma^2 = mean(u^2).
void zscore_row_backward(const double* x, const double* z, double sigma, const double* gz,
                         std::int64_t d, double* gx) {
  double mean = 0.0;
  for (std::int64_t j = 0; j < d; ++j) mean += x[j];
  mean /= static_cast<double>(d);
  double zg = 0.0; // z . gz
  for (std::int64_t j = 0; j < d; ++j) zg += z[j] * gz[j];
  // du_j = gz_j/sigma - u_j * (u.gz) / (d sigma^3); note u_j = z_j * sigma.
  double gu_mean = 0.0;
  const double dd = static_cast<double>(d);
  for (std::int64_t j = 0; j < d; ++j) {
    const double gu = gz[j] / sigma - z[j] * zg / (dd * sigma);
    gx[j] += gu;
    gu_mean += gu;
  }
  gu_mean /= dd;
  for (std::int64_t j = 0; j < d; ++j) gx[j] -= gu_mean;
}

} // namespace

Tensor zncc_matrix(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    shape_fail("zncc_matrix", "expected (N,D) and (M,D)");
  const std::int64_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  if (d < 2) shape_fail("zncc_matrix", "descriptor length must be >= 2");
  auto za = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * d));
  auto zb = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m * d));
  auto sa = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  auto sb = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
  auto ca = std::make_shared<std::vector<char>>(static_cast<std::size_t>(n));
  auto cb = std::make_shared<std::vector<char>>(static_cast<std::size_t>(m));
  zscore_rows(a.values().data(), n, d, za->data(), sa->data(), *ca);
  zscore_rows(b.values().data(), m, d, zb->data(), sb->data(), *cb);

  std::vector<double> out(static_cast<std::size_t>(n * m));
  MapMat(out.data(), n, m).noalias() =
      MapConst(za->data(), n, d) * MapConst(zb->data(), m, d).transpose() / static_cast<double>(d);
  return make_op({n, m}, std::move(out), {a, b},
                 [a, b, za, zb, sa, sb, ca, cb, n, m, d](detail::Node& self) {
                   MapConst g(self.grad.data(), n, m);
                   const double dd = static_cast<double>(d);
                   if (a.requires_grad()) {
                     std::vector<double> gza(static_cast<std::size_t>(n * d));
                     MapMat(gza.data(), n, d).noalias() = g * MapConst(zb->data(), m, d) / dd;
                     auto& ga = a.node()->grad_ref();
                     for (std::int64_t i = 0; i < n; ++i) {
                       if ((*ca)[static_cast<std::size_t>(i)]) continue;
                       zscore_row_backward(a.values().data() + i * d, za->data() + i * d,
                                           (*sa)[static_cast<std::size_t>(i)], gza.data() + i * d,
                                           d, ga.data() + i * d);
                     }
                   }
                   if (b.requires_grad()) {
                     std::vector<double> gzb(static_cast<std::size_t>(m * d));
                     MapMat(gzb.data(), m, d).noalias() =
                         g.transpose() * MapConst(za->data(), n, d) / dd;
                     auto& gb = b.node()->grad_ref();
                     for (std::int64_t i = 0; i < m; ++i) {
                       if ((*cb)[static_cast<std::size_t>(i)]) continue;
                       zscore_row_backward(b.values().data() + i * d, zb->data() + i * d,
                                           (*sb)[static_cast<std::size_t>(i)], gzb.data() + i * d,
                                           d, gb.data() + i * d);
                     }
                   }
                 });
}

Tensor zncc_pairs(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape() != b.shape())
    shape_fail("zncc_pairs", "expected matching (N,D) tensors");
  const std::int64_t n = a.dim(0), d = a.dim(1);
  if (d < 2) shape_fail("zncc_pairs", "descriptor length must be >= 2");
  auto za = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * d));
  auto zb = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * d));
  auto sa = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  auto sb = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  auto ca = std::make_shared<std::vector<char>>(static_cast<std::size_t>(n));
  auto cb = std::make_shared<std::vector<char>>(static_cast<std::size_t>(n));
  zscore_rows(a.values().data(), n, d, za->data(), sa->data(), *ca);
  zscore_rows(b.values().data(), n, d, zb->data(), sb->data(), *cb);
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) s += (*za)[i * d + j] * (*zb)[i * d + j];
    out[static_cast<std::size_t>(i)] = s / static_cast<double>(d);
  }
  return make_op({n}, std::move(out), {a, b},
                 [a, b, za, zb, sa, sb, ca, cb, n, d](detail::Node& self) {
                   const double dd = static_cast<double>(d);
                   std::vector<double> gz(static_cast<std::size_t>(d));
                   for (std::int64_t i = 0; i < n; ++i) {
                     const double gi = self.grad[static_cast<std::size_t>(i)];
                     if (gi == 0.0) continue;
                     if (a.requires_grad() && !(*ca)[static_cast<std::size_t>(i)]) {
                       for (std::int64_t j = 0; j < d; ++j) gz[j] = gi * (*zb)[i * d + j] / dd;
                       zscore_row_backward(a.values().data() + i * d, za->data() + i * d,
                                           (*sa)[static_cast<std::size_t>(i)], gz.data(), d,
                                           a.node()->grad_ref().data() + i * d);
                     }
                     if (b.requires_grad() && !(*cb)[static_cast<std::size_t>(i)]) {
                       for (std::int64_t j = 0; j < d; ++j) gz[j] = gi * (*za)[i * d + j] / dd;
                       zscore_row_backward(b.values().data() + i * d, zb->data() + i * d,
                                           (*sb)[static_cast<std::size_t>(i)], gz.data(), d,
                                           b.node()->grad_ref().data() + i * d);
                     }
                   }
                 });
}

Tensor procrustes_rotation(const Tensor& s) {
  if (s.ndim() != 2 || s.dim(0) != 3 || s.dim(1) != 3)
    shape_fail("procrustes_rotation", "expected a 3x3 tensor");
  Eigen::Matrix3d sm;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) sm(i, j) = s.at(i * 3 + j);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(sm, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sig = svd.singularValues();
  const Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();

  if (!(sig(0) > 0.0) || sig(1) <= 1e-10 * sig(0))
    throw DegenerateError("procrustes_rotation: rank-deficient covariance (collinear points)");

  const double det_vu = (v * u.transpose()).determinant();
  Eigen::Vector3d dvec(1.0, 1.0, det_vu > 0.0 ? 1.0 : -1.0);
  const Eigen::Matrix3d r = v * dvec.asDiagonal() * u.transpose();

  if (s.requires_grad()) {
    // The SVD gradient divides by sigma_i^2 - sigma_j^2.
    const double scale = std::max(sig(0) * sig(0), 1.0);
    for (int i = 0; i < 3; ++i)
      for (int j = i + 1; j < 3; ++j)
        if (std::abs(sig(i) * sig(i) - sig(j) * sig(j)) < 1e-9 * scale)
          throw DegenerateError("procrustes_rotation: near-equal singular values");
  }

  std::vector<double> out(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out[static_cast<std::size_t>(i * 3 + j)] = r(i, j);
  return make_op({3, 3}, std::move(out), {s}, [s, u, v, sig, dvec](detail::Node& self) {
    if (!s.requires_grad()) return;
    Eigen::Matrix3d rbar;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) rbar(i, j) = self.grad[static_cast<std::size_t>(i * 3 + j)];
    // R = V D U^T with D treated as locally constant.
    const Eigen::Matrix3d d = dvec.asDiagonal();
    const Eigen::Matrix3d vbar = rbar * u * d;
    const Eigen::Matrix3d ubar = rbar.transpose() * v * d;
    Eigen::Matrix3d f = Eigen::Matrix3d::Zero();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (i != j) f(i, j) = 1.0 / (sig(j) * sig(j) - sig(i) * sig(i));
    const Eigen::Matrix3d sigma = sig.asDiagonal();
    const Eigen::Matrix3d ju = f.cwiseProduct(u.transpose() * ubar - ubar.transpose() * u);
    const Eigen::Matrix3d jv = f.cwiseProduct(v.transpose() * vbar - vbar.transpose() * v);
    const Eigen::Matrix3d sbar = u * (ju * sigma + sigma * jv) * v.transpose();
    auto& gs = s.node()->grad_ref();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) gs[static_cast<std::size_t>(i * 3 + j)] += sbar(i, j);
  });
}

} // namespace vloc::ops

#include "vloc/grad_check.hpp"

#include <cmath>
#include <string>

namespace vloc {

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = Tensor::from_values(x.shape(), x.values(), true);

  Tensor y = f(leaf);
  if (y.size() != 1) throw ShapeError("grad_check: f must return a scalar");
  if (!std::isfinite(y.value()))
    throw NumericError("grad_check: f(x) is non-finite at the unperturbed point");
  backward(y);
  if (!leaf.has_grad()) throw Error("grad_check: f does not depend on x");
  const std::vector<double> analytic = leaf.grad();

  Tensor probe = Tensor::from_values(x.shape(), x.values(), false);
  double worst = 0.0;
  auto& vals = probe.mutable_values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + eps;
    const double fp = f(probe).value();
    vals[i] = orig - eps;
    const double fm = f(probe).value();
    vals[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite value at coordinate " + std::to_string(i));
    const double fd = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

} // namespace vloc

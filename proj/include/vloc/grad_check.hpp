#pragma once

#include <functional>

#include "vloc/tensor.hpp"

namespace vloc {

// Compares the analytic gradient of f at x against central finite
// differences. Returns the worst relative error
//   max_i |analytic_i - fd_i| / max(1, |fd_i|).
// Throws NumericError (naming the coordinate) when f evaluates non-finite.
// f must build a fresh graph on every call.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

} // namespace vloc

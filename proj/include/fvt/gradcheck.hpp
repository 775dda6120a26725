#pragma once

#include <functional>
#include <vector>

#include "fvt/tensor.hpp"

namespace fvt {
inline namespace FVT_NS {

struct GradCheckResult {
  double max_rel_error = 0;
  double analytic_at_worst = 0;
  double numeric_at_worst = 0;
  std::size_t elements = 0;
};

// Compares the autodiff gradient of the scalar `loss()` with respect to each
// tensor in `wrt` against a central finite difference at `step`, using the
// fourth-order stencil (8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h.
// Relative error per element is |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult finite_diff_check(const std::function<Tensor()>& loss,
                                  const std::vector<Tensor>& wrt, double step);

// Single-input form; `x` must be a leaf with requires_grad set.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step);

}  // namespace FVT_NS
}  // namespace fvt

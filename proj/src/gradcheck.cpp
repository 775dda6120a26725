#include "fvt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fvt/errors.hpp"

namespace fvt {
inline namespace FVT_NS {

namespace {

double eval_scalar(const std::function<Tensor()>& loss) {
  NoGradGuard no_grad;
  const Tensor y = loss();
  if (y.numel() != 1) throw ContractError("finite_diff_check: loss must be scalar");
  return static_cast<double>(y.item());
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor()>& loss,
                                  const std::vector<Tensor>& wrt, double step) {
  if (!(step > 0)) throw ContractError("finite_diff_check: step must be positive");
  for (const auto& t : wrt) {
    if (!t.is_leaf() || !t.requires_grad()) {
      throw ContractError("finite_diff_check: inputs must be leaves with requires_grad");
    }
  }

  std::vector<Tensor> params = wrt;
  for (auto& t : params) t.zero_grad();
  backward(loss());
  std::vector<std::vector<real>> analytic;
  for (const auto& t : params) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), real{0});
    }
  }

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params[p].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const real original = data[i];
      // Fourth-order central stencil; each difference is divided by the
      // step actually realized after rounding to `real`.
      auto central = [&](double offset) {
        data[i] = static_cast<real>(original + offset);
        const double plus_x = data[i];
        const double f_plus = eval_scalar(loss);
        data[i] = static_cast<real>(original - offset);
        const double minus_x = data[i];
        const double f_minus = eval_scalar(loss);
        return (f_plus - f_minus) / (plus_x - minus_x);
      };
      const double near = central(step);
      const double far = central(2 * step);
      data[i] = original;
      const double numeric = (4.0 * near - far) / 3.0;
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.elements;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.analytic_at_worst = a;
        result.numeric_at_worst = numeric;
      }
    }
  }
  for (auto& t : params) t.zero_grad();
  return result;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step) {
  return finite_diff_check([&] { return f(x); }, {x}, step).max_rel_error;
}

}  // namespace FVT_NS
}  // namespace fvt

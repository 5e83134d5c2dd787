#include "ustf/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ustf/errors.hpp"

namespace ustf {

GradCheckReport finite_diff_check(const ScalarFn& f, Tensor x, double tol, const GradCheckOptions& options) {
  if (!x.is_leaf()) throw Error("finite_diff_check: x must be a leaf tensor");
  const bool had_grad_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();

  std::vector<double> analytic(x.numel(), 0.0);
  {
    Tensor y = f(x);
    if (y.numel() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
    y.backward();
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  }
  for (double& a : analytic) a *= options.corrupt_factor;

  std::vector<double> numeric(x.numel(), 0.0);
  {
    NoGradGuard no_grad;
    auto xd = x.mutable_data();
    const double h = options.step;
    for (std::size_t i = 0; i < xd.size(); ++i) {
      const double saved = xd[i];
      xd[i] = saved + h;
      const double plus = f(x).item();
      xd[i] = saved - h;
      const double minus = f(x).item();
      xd[i] = saved;
      numeric[i] = (plus - minus) / (2.0 * h);
    }
  }
  x.zero_grad();
  x.set_requires_grad(had_grad_flag);

  GradCheckReport report;
  double worst_abs = 0.0, scale = 1e-8;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double d = std::abs(analytic[i] - numeric[i]);
    if (d > worst_abs) {
      worst_abs = d;
      report.worst_index = i;
    }
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  report.max_relative_error = worst_abs / scale;
  report.passed = report.max_relative_error <= tol;
  return report;
}

}  // namespace ustf

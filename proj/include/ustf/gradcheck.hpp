#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ustf/tensor.hpp"

namespace ustf {

struct GradCheckReport {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-4;
  // Multiplies the analytic gradient before comparison. Anything other than
  // 1 is a negative control.
  double corrupt_factor = 1.0;
};

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares the reverse-mode gradient of f at x with central differences.
///
/// x must be a leaf; it is perturbed in place and restored. The error is
/// max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8), and
/// worst_index is the coordinate attaining the numerator.
GradCheckReport finite_diff_check(const ScalarFn& f, Tensor x, double tol,
                                  const GradCheckOptions& options = {});

}  // namespace ustf

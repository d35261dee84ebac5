// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "fpt/tensor.hpp"

namespace fpt {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the reverse-mode gradient of the scalar `f` with respect to the
/// leaf `x` against central differences, coordinate by coordinate, using
/// |a - n| / (|a| + |n| + 1e-12). `f` must read `x` at call time; the leaf's
/// values are perturbed in place and restored before returning.
GradCheckResult finite_diff_check_detailed(const std::function<Tensor<double>()>& f,
                                           Tensor<double> x, double h = 1e-5);

/// Max relative error only.
double finite_diff_check(const std::function<Tensor<double>()>& f, Tensor<double> x,
                         double h = 1e-5);

}  // namespace fpt

// SPDX-License-Identifier: Apache-2.0
#include "fpt/gradcheck.hpp"

#include <cmath>
#include <vector>

namespace fpt {

GradCheckResult finite_diff_check_detailed(const std::function<Tensor<double>()>& f,
                                           Tensor<double> x, double h) {
  const bool was_learnable = x.requires_grad();
  x.set_requires_grad(true);
  x.clear_grad();
  f().backward();
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) {
    analytic.assign(x.grad().begin(), x.grad().end());
  }
  x.clear_grad();

  GradCheckResult result;
  auto values = x.mutable_values();
  {
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double plus = f().item();
      values[i] = original - h;
      const double minus = f().item();
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * h);
      const double err =
          std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
      if (err > result.max_rel_error || i == 0) {
        result = {err, i, analytic[i], numeric};
      }
    }
  }
  x.set_requires_grad(was_learnable);
  return result;
}

double finite_diff_check(const std::function<Tensor<double>()>& f, Tensor<double> x, double h) {
  return finite_diff_check_detailed(f, std::move(x), h).max_rel_error;
}

}  // namespace fpt

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "fpt/tensor.hpp"

namespace fpt {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Per-parameter moments plus the shared step counter.
template <typename T>
struct OptimizerState {
  AdamWOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  /// Zeroed moments shaped like `params`.
  static OptimizerState init(const std::vector<Tensor<T>>& params, AdamWOptions options);
};

/// One decoupled-weight-decay Adam update. A parameter without a gradient
/// buffer is treated as having a zero gradient (it still decays).
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state);

extern template struct OptimizerState<float>;
extern template struct OptimizerState<double>;

}  // namespace fpt

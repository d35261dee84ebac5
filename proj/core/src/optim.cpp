// SPDX-License-Identifier: Apache-2.0
#include "fpt/optim.hpp"

#include <cmath>
#include <string>

namespace fpt {

template <typename T>
OptimizerState<T> OptimizerState<T>::init(const std::vector<Tensor<T>>& params,
                                          AdamWOptions options) {
  OptimizerState state;
  state.options = options;
  state.first_moment.reserve(params.size());
  state.second_moment.reserve(params.size());
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.numel(), T(0));
    state.second_moment.emplace_back(p.numel(), T(0));
  }
  return state;
}

template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw ShapeError("adamw_step: optimizer tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].numel() ||
        state.second_moment[i].size() != params[i].numel()) {
      throw ShapeError("adamw_step: moment shape mismatch for parameter " + std::to_string(i));
    }
    if (params[i].has_grad() && params[i].grad().size() != params[i].numel()) {
      throw ShapeError("adamw_step: gradient shape mismatch for parameter " + std::to_string(i));
    }
  }

  state.step += 1;
  const auto& o = state.options;
  const double t = static_cast<double>(state.step);
  const T bias1 = T(1.0 - std::pow(o.beta1, t));
  const T bias2 = T(1.0 - std::pow(o.beta2, t));
  const T lr = T(o.lr);
  const T decay = T(1.0 - o.lr * o.weight_decay);
  const T b1 = T(o.beta1);
  const T b2 = T(o.beta2);
  const T eps = T(o.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_values();
    const auto grad = params[i].grad();
    const bool has_grad = params[i].has_grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const T g = has_grad ? grad[j] : T(0);
      values[j] *= decay;
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      const T m_hat = m[j] / bias1;
      const T v_hat = v[j] / bias2;
      values[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adamw_step(std::vector<Tensor<float>>&, OptimizerState<float>&);
template void adamw_step(std::vector<Tensor<double>>&, OptimizerState<double>&);

}  // namespace fpt

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "fpt/ops.hpp"
#include "fpt/random.hpp"
#include "fpt/tensor.hpp"

namespace fpt {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng, bool learnable);

template <typename T>
struct Linear {
  Tensor<T> weight;  // (in, out)
  Tensor<T> bias;    // (out)

  /// Xavier-uniform weight, zero bias.
  static Linear xavier(std::size_t in, std::size_t out, Rng& rng, bool learnable);
  static Linear zeros(std::size_t in, std::size_t out, bool learnable);

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
  void collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const;
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
  T eps = T(1e-6);

  static LayerNormParams identity(std::size_t dim, bool learnable);

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, gain, bias, eps); }
  void collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const;
};

/// Pre-norm transformer encoder block with separate q/k/v projections.
template <typename T>
struct BlockWeights {
  std::size_t heads = 1;
  LayerNormParams<T> norm1;
  Linear<T> q, k, v, proj;
  LayerNormParams<T> norm2;
  Linear<T> fc1, fc2;

  static BlockWeights create(std::size_t dim, std::size_t heads, std::size_t mlp_ratio, Rng& rng,
                             bool learnable);
  void collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const;
};

template <typename T>
struct BlockTrace {
  Tensor<T> output;    // (B, N, d)
  Tensor<T> attn_map;  // (B, h, N, N)
  Tensor<T> keys;      // (B, h, N, d / h)
  Tensor<T> values;    // (B, h, N, d / h)
};

/// x + proj(MHA(LN1 x)), then + fc2(gelu(fc1(LN2 x))). `rng` may be null
/// when dropout is zero.
template <typename T>
BlockTrace<T> block_forward(const BlockWeights<T>& w, const Tensor<T>& x, double dropout = 0.0,
                            Rng* rng = nullptr);

/// Non-differentiable patch extraction: (B, C, H, H) images laid out
/// channel-planar -> (B, (H/p)^2, C*p*p) rows ordered (channel, row, col).
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch);

/// Patch rows -> linear -> prepend CLS -> add positional embedding.
template <typename T>
Tensor<T> embed_patches(const Tensor<T>& images, std::size_t patch, const Linear<T>& projection,
                        const Tensor<T>& cls_token, const Tensor<T>& pos_embed);

}  // namespace fpt

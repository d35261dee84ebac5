// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

#include "fpt/random.hpp"
#include "fpt/tensor.hpp"

/// Differentiable primitives. Every op is a pure function of its inputs and
/// reduces in a fixed loop order, so results are bit-reproducible.
namespace fpt::ops {

/// a + b where b's shape equals a trailing suffix of a's shape (b is
/// broadcast over the leading axes).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Sum of all elements as a rank-0 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// x: (..., in), weight: (in, out), bias: (out) or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Throws InvalidValueError on non-finite input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// Normalizes over the last axis (extent >= 2), then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps);

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Inverted dropout. p == 0 returns x itself.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng);

template <typename T>
struct AttentionResult {
  Tensor<T> output;  // (B, h, n_q, d_h)
  Tensor<T> map;     // (B, h, n_q, n_k), rows sum to one; never on the tape
};

/// softmax(Q K^T / sqrt(d_h)) V over (B, h, n, d_h) operands.
template <typename T>
AttentionResult<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k,
                                        const Tensor<T>& v);

/// (B, N, h * d_h) -> (B, h, N, d_h)
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads);

/// (B, h, N, d_h) -> (B, N, h * d_h)
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x);

/// (B, N1, d) ++ (B, N2, d) along the token axis.
template <typename T>
Tensor<T> concat_tokens(const Tensor<T>& a, const Tensor<T>& b);

/// Tokens [begin, begin + count) of a (B, N, d) sequence.
template <typename T>
Tensor<T> slice_tokens(const Tensor<T>& x, std::size_t begin, std::size_t count);

/// (S...) -> (batch, S...), gradient summed back over the batch.
template <typename T>
Tensor<T> expand_batch(const Tensor<T>& x, std::size_t batch);

/// Mean cross-entropy of (B, C) logits against integer labels in [0, C).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace fpt::ops

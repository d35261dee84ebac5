// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fpt/backbone.hpp"
#include "fpt/tensor.hpp"

namespace fpt {

/// Bumped whenever the scoring or ranking rule changes; part of the cache key.
inline constexpr int kSelectionRuleVersion = 1;

struct TokenSelection {
  std::vector<std::uint32_t> indices;  // strictly increasing
  std::vector<double> scores;          // one per token of the scored sequence
  double ratio = 1.0;
};

/// Frozen keys/values of one layer restricted to the selected tokens of every
/// sample in a batch. All samples keep the same number of tokens.
template <typename T>
struct LayerFusionFeatures {
  std::size_t layer = 0;
  std::size_t batch = 0;
  std::size_t heads = 0;
  std::size_t count = 0;  // S_sel
  std::size_t head_dim = 0;
  std::vector<std::uint32_t> indices;  // (batch, count)
  Tensor<T> keys;                      // (batch, heads, count, head_dim)
  Tensor<T> values;
};

/// Importance of token j = mean over heads and query rows of the attention
/// paid to j. Input (B, h, N, N); returns B * N scores, row-major by sample.
template <typename T>
std::vector<double> token_scores(const Tensor<T>& attn_map);

/// Number of patch tokens kept at ratio m: ceil(m * n_patch), at least one.
std::size_t kept_patch_count(std::size_t n_patch, double ratio);

/// Keeps ceil(m * N_patch) highest-scoring patch tokens (ties toward the lower
/// index). With keep_cls, index 0 is CLS: always kept and outside the budget.
TokenSelection select_topk(std::span<const double> scores, double ratio, bool keep_cls);

/// Total kept tokens (CLS included) for a sequence of n_tokens.
std::size_t selected_count(std::size_t n_tokens, double ratio, bool keep_cls);

/// Copies the selected rows of a tap's per-head keys/values, in index order.
template <typename T>
LayerFusionFeatures<T> gather_selected(const LayerTap<T>& tap, std::size_t layer,
                                       std::span<const TokenSelection> selections);

}  // namespace fpt

// SPDX-License-Identifier: Apache-2.0
#include "fpt/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace fpt {

template <typename T>
std::vector<double> token_scores(const Tensor<T>& attn_map) {
  if (attn_map.rank() != 4 || attn_map.dim(2) != attn_map.dim(3)) {
    throw ShapeError("token_scores: expects (B, h, N, N), got " + shape_str(attn_map.shape()));
  }
  const std::size_t batch = attn_map.dim(0);
  const std::size_t heads = attn_map.dim(1);
  const std::size_t n = attn_map.dim(2);
  std::vector<double> scores(batch * n, 0.0);
  const auto a = attn_map.values();
  const double norm = 1.0 / static_cast<double>(heads * n);
  for (std::size_t b = 0; b < batch; ++b) {
    double* out = scores.data() + b * n;
    for (std::size_t h = 0; h < heads; ++h) {
      const T* map = a.data() + (b * heads + h) * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        const T* row = map + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          out[j] += static_cast<double>(row[j]);
        }
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      out[j] *= norm;
    }
  }
  return scores;
}

std::size_t kept_patch_count(std::size_t n_patch, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw ConfigError("selection ratio must be in (0, 1], got " + std::to_string(ratio));
  }
  if (n_patch == 0) {
    return 0;
  }
  // The slack absorbs products like 0.3 * 10 = 3.0000000000000004.
  const double raw = ratio * static_cast<double>(n_patch);
  auto kept = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::clamp<std::size_t>(kept, 1, n_patch);
}

std::size_t selected_count(std::size_t n_tokens, double ratio, bool keep_cls) {
  const std::size_t n_patch = keep_cls && n_tokens > 0 ? n_tokens - 1 : n_tokens;
  return kept_patch_count(n_patch, ratio) + (keep_cls && n_tokens > 0 ? 1 : 0);
}

TokenSelection select_topk(std::span<const double> scores, double ratio, bool keep_cls) {
  TokenSelection sel;
  sel.ratio = ratio;
  sel.scores.assign(scores.begin(), scores.end());
  const std::size_t first = keep_cls && !scores.empty() ? 1 : 0;
  const std::size_t n_patch = scores.size() - first;
  const std::size_t kept = kept_patch_count(n_patch, ratio);

  std::vector<std::uint32_t> order(n_patch);
  std::iota(order.begin(), order.end(), static_cast<std::uint32_t>(first));
  auto better = [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) {
      return scores[a] > scores[b];
    }
    return a < b;
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kept), order.end(),
                   better);
  order.resize(kept);
  if (first == 1) {
    order.push_back(0);
  }
  std::sort(order.begin(), order.end());
  sel.indices = std::move(order);
  return sel;
}

template <typename T>
LayerFusionFeatures<T> gather_selected(const LayerTap<T>& tap, std::size_t layer,
                                       std::span<const TokenSelection> selections) {
  const auto& keys = tap.keys;
  if (keys.rank() != 4 || tap.values.shape() != keys.shape()) {
    throw ShapeError("gather_selected: tap keys/values must be matching (B, h, N, d_h)");
  }
  const std::size_t batch = keys.dim(0);
  const std::size_t heads = keys.dim(1);
  const std::size_t n = keys.dim(2);
  const std::size_t dh = keys.dim(3);
  if (selections.size() != batch) {
    throw ShapeError("gather_selected: " + std::to_string(selections.size()) +
                     " selections for batch of " + std::to_string(batch));
  }
  const std::size_t count = batch ? selections[0].indices.size() : 0;
  LayerFusionFeatures<T> out;
  out.layer = layer;
  out.batch = batch;
  out.heads = heads;
  out.count = count;
  out.head_dim = dh;
  out.indices.reserve(batch * count);
  std::vector<T> k(batch * heads * count * dh);
  std::vector<T> v(k.size());
  const auto kv = keys.values();
  const auto vv = tap.values.values();
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& idx = selections[b].indices;
    if (idx.size() != count) {
      throw ShapeError("gather_selected: samples in a batch must keep equal token counts");
    }
    for (auto i : idx) {
      if (i >= n) {
        throw IndexError("gather_selected: index " + std::to_string(i) + " out of range for " +
                         std::to_string(n) + " tokens");
      }
      out.indices.push_back(i);
    }
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t s = 0; s < count; ++s) {
        const std::size_t src = ((b * heads + h) * n + idx[s]) * dh;
        const std::size_t dst = ((b * heads + h) * count + s) * dh;
        std::copy_n(kv.data() + src, dh, k.data() + dst);
        std::copy_n(vv.data() + src, dh, v.data() + dst);
      }
    }
  }
  out.keys = Tensor<T>(Shape{batch, heads, count, dh}, std::move(k), false);
  out.values = Tensor<T>(Shape{batch, heads, count, dh}, std::move(v), false);
  return out;
}

template std::vector<double> token_scores(const Tensor<float>&);
template std::vector<double> token_scores(const Tensor<double>&);
template LayerFusionFeatures<float> gather_selected(const LayerTap<float>&, std::size_t,
                                                    std::span<const TokenSelection>);
template LayerFusionFeatures<double> gather_selected(const LayerTap<double>&, std::size_t,
                                                     std::span<const TokenSelection>);

}  // namespace fpt

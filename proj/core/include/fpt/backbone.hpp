// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "fpt/config.hpp"
#include "fpt/layers.hpp"

namespace fpt {

/// Everything one frozen layer exposes for reuse by the side network.
template <typename T>
struct LayerTap {
  Tensor<T> z;         // layer output, (B, N_M, d_M)
  Tensor<T> attn_map;  // (B, h_M, N_M, N_M)
  Tensor<T> keys;      // post-projection, per head: (B, h_M, N_M, d_M / h_M)
  Tensor<T> values;
};

template <typename T>
struct BackboneWeights {
  Linear<T> patch_embed;  // (3 p^2, d)
  Tensor<T> cls_token;    // (d)
  Tensor<T> pos_embed;    // (1 + pretrain_grid^2, d), CLS row first
  std::vector<BlockWeights<T>> blocks;

  /// Seeded random weights, all frozen.
  static BackboneWeights random(const BackboneConfig& cfg);
  std::vector<NamedTensor<T>> named_tensors() const;
};

/// Bicubic (a = -0.75, half-pixel centers, clamped borders) resampling of a
/// (1 + g^2, d) positional table to (1 + g'^2, d). Row 0 is the CLS vector and
/// passes through untouched. Pass has_cls = false for a bare (g^2, d) grid.
template <typename T>
std::vector<T> interpolate_pos_embed(std::span<const T> pos, std::size_t dim, std::size_t grid,
                                     std::size_t target_grid, bool has_cls = true);

/// (B, 3, H, H) -> (B, (H/p)^2 + 1, d) with CLS at index 0. Throws ConfigError
/// when H is not the configured high resolution or not divisible by p.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& images, const BackboneConfig& cfg,
                      const BackboneWeights<T>& weights, const Tensor<T>& pos_embed);

/// The frozen large model. Forward passes never record a tape.
template <typename T>
class Backbone {
 public:
  using TapVisitor = std::function<void(std::size_t layer, const LayerTap<T>&)>;

  Backbone(BackboneConfig cfg, BackboneWeights<T> weights);
  /// Seeded random weights, or the archive at cfg.weights_path when set.
  static Backbone create(const BackboneConfig& cfg);

  /// Streams taps layer by layer; a tap is released once the visitor returns,
  /// so at most one layer's activations are alive at a time.
  void forward_streaming(const Tensor<T>& images, const TapVisitor& visit) const;
  std::vector<LayerTap<T>> forward(const Tensor<T>& images) const;

  const BackboneConfig& config() const { return cfg_; }
  const BackboneWeights<T>& weights() const { return weights_; }
  BackboneWeights<T>& weights() { return weights_; }
  const Tensor<T>& resampled_pos_embed() const { return pos_target_; }
  std::vector<NamedTensor<T>> named_tensors() const { return weights_.named_tensors(); }

  /// Digest of every weight value; identifies the frozen path in caches.
  std::uint64_t identity() const;

 private:
  void check_frozen() const;

  BackboneConfig cfg_;
  BackboneWeights<T> weights_;
  Tensor<T> pos_target_;
};

/// Weight import format: framed header (magic "FPTW") declaring layer count,
/// dims and per-tensor shapes, then little-endian f32 arrays in that order.
void save_backbone_weights(const std::filesystem::path& path, const BackboneConfig& cfg,
                           const BackboneWeights<float>& weights);
BackboneWeights<float> load_backbone_weights(const std::filesystem::path& path,
                                             const BackboneConfig& cfg);

}  // namespace fpt

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpt/config.hpp"
#include "fpt/layers.hpp"
#include "fpt/selection.hpp"

namespace fpt {

/// Resolved side-network shape.
struct SideDims {
  std::size_t image_size = 32;
  std::size_t patch = 8;
  std::size_t dim = 8;
  std::size_t heads = 2;
  std::size_t layers = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_prompts = 16;
  std::size_t num_classes = 4;
  std::size_t backbone_dim = 64;
  std::size_t backbone_heads = 4;
  bool fusion = true;
  bool shared_prompts = false;
  double dropout = 0.0;

  std::size_t grid() const { return image_size / patch; }
  std::size_t tokens() const { return grid() * grid() + 1; }

  /// side_only drops the fusion path and prompts; fpt_symmetric feeds the
  /// side network the high resolution.
  static SideDims from_config(const FptConfig& cfg, TrainMode mode);
};

/// Per-layer linear maps aligning prompt width with the frozen width.
template <typename T>
struct FusionWeights {
  Linear<T> f_in;   // d_S -> d_M (queries)
  Linear<T> f_out;  // d_M -> d_S
};

template <typename T>
struct SideNetwork {
  SideDims dims;
  Linear<T> patch_embed;
  Tensor<T> cls_token;  // (d_S)
  Tensor<T> pos_embed;  // (N_S, d_S)
  std::vector<BlockWeights<T>> blocks;
  LayerNormParams<T> final_norm;
  Linear<T> head;
  /// (P, d_S) per layer, a single entry when shared, empty without fusion.
  std::vector<Tensor<T>> prompts;
  std::vector<FusionWeights<T>> fusion;

  static SideNetwork create(const SideDims& dims, std::uint64_t seed);

  bool has_fusion() const { return !fusion.empty(); }
  const Tensor<T>& prompts_for(std::size_t layer) const;
  /// Every tensor, all learnable.
  std::vector<NamedTensor<T>> named_parameters() const;
};

template <typename T>
struct FfmOutput {
  Tensor<T> sequence;       // (B, N_S + P, d_S)
  Tensor<T> cross_map;      // (B, h_M, P, S_sel); undefined when P = 0
};

/// [z_S, f_out(CA(z_p, K, V)) + z_p] where the cross-attention queries are
/// f_in(z_p) split into the frozen model's heads. `layer` must match the
/// features' layer index.
template <typename T>
FfmOutput<T> ffm_forward(const Tensor<T>& z_side, const LayerFusionFeatures<T>& fused,
                         const Tensor<T>& prompts, const FusionWeights<T>& weights,
                         std::size_t layer);

struct SideLayerTrace {
  std::size_t input_tokens = 0;
  std::size_t fused_tokens = 0;
  std::size_t output_tokens = 0;
  Shape cross_map_shape;
};

/// One side layer: fuse (optional), transformer block over N_S + P tokens,
/// then drop the trailing P prompt rows. Without fusion it is a plain block.
template <typename T>
Tensor<T> side_layer_forward(std::size_t layer, const Tensor<T>& z_side,
                             const LayerFusionFeatures<T>* fused, const Tensor<T>* prompts,
                             const FusionWeights<T>* fusion, const BlockWeights<T>& block,
                             double dropout = 0.0, Rng* rng = nullptr,
                             SideLayerTrace* trace = nullptr);

/// Low-resolution images (B, 3, h, h) plus one feature set per layer (empty
/// for a network without fusion) -> logits (B, C) from the final CLS token.
template <typename T>
Tensor<T> side_forward(const Tensor<T>& images_low, std::span<const LayerFusionFeatures<T>> features,
                       const SideNetwork<T>& net, Rng* dropout_rng = nullptr,
                       std::vector<SideLayerTrace>* trace = nullptr);

/// Checkpoint: framed header (magic "FPTK") echoing the config and backbone
/// identity plus a tensor directory, then f32 arrays of learnable tensors only.
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config_echo,
                     std::uint64_t backbone_identity, const SideNetwork<float>& net);
/// Overwrites `net`'s tensors in place; returns the checkpoint header.
nlohmann::json load_checkpoint(const std::filesystem::path& path, SideNetwork<float>& net);

}  // namespace fpt

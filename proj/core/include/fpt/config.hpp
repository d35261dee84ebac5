// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace fpt {

/// Frozen high-resolution backbone shape.
struct BackboneConfig {
  int image_size_high = 128;
  int patch_size = 8;
  int dim = 64;
  int layers = 4;
  int heads = 4;
  int mlp_ratio = 4;
  /// Grid side length the positional embedding is stored at.
  int pretrain_grid = 16;
  std::uint64_t weight_seed = 1234;
  /// Optional weight archive to import instead of seeded random weights.
  std::string weights_path;

  int grid() const { return image_size_high / patch_size; }
  int tokens() const { return grid() * grid() + 1; }
  int head_dim() const { return dim / heads; }
};

struct SideConfig {
  int image_size_low = 32;
  int reduction_factor = 8;
  /// 0 selects max(1, backbone heads / 2).
  int heads = 0;
  int num_prompts = 16;
  bool shared_prompts = false;
  int num_classes = 4;
  double dropout = 0.0;
};

struct SelectionConfig {
  double ratio = 0.2;
  bool keep_cls = true;
  /// -1: every layer selects from its own attention map. Otherwise all layers
  /// reuse the selection computed from this layer's map.
  int source_layer = -1;
};

struct SynthSpec {
  int canvas = 128;
  int cue_size = 4;
  int num_classes = 4;
  double noise = 16.0;
  int train_count = 480;
  int val_count = 160;
  int test_count = 320;
  std::uint64_t seed = 7;
};

struct DataConfig {
  SynthSpec synth;
  /// Per-channel normalization in [0, 1] pixel units. Resolved from the
  /// training split when absent.
  std::optional<std::array<double, 3>> norm_mean;
  std::optional<std::array<double, 3>> norm_std;
};

enum class TrainMode { fpt, side_only, fpt_no_selection, fpt_symmetric };

std::string_view to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view text);

struct TrainRunConfig {
  int epochs = 20;
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::fpt;
  bool use_cache = true;
};

struct FptConfig {
  static constexpr int kSchemaVersion = 1;

  BackboneConfig backbone;
  SideConfig side;
  SelectionConfig selection;
  DataConfig data;
  TrainRunConfig train;

  int side_dim() const { return backbone.dim / side.reduction_factor; }
  int side_heads() const;
  int side_grid() const { return side.image_size_low / backbone.patch_size; }
  int side_tokens() const { return side_grid() * side_grid() + 1; }

  /// Throws ConfigError on any cross-field violation.
  void validate() const;

  /// The large-model setting: 512/224 inputs, patch 16, 768 wide, 12 layers.
  static FptConfig vit_base();
  /// Desk-scale defaults (128/32 inputs, patch 8).
  static FptConfig desk();
};

nlohmann::json to_json(const FptConfig& cfg);
/// Rejects unknown keys and unsupported schema versions; validates.
FptConfig config_from_json(const nlohmann::json& j);
FptConfig load_config(const std::string& path);
void save_config(const FptConfig& cfg, const std::string& path);

/// Digest of the whole configuration; embedded in every artifact.
std::uint64_t config_digest(const FptConfig& cfg);

}  // namespace fpt

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpt/backbone.hpp"
#include "fpt/cache.hpp"
#include "fpt/config.hpp"
#include "fpt/data.hpp"
#include "fpt/fusion.hpp"
#include "fpt/metrics.hpp"

namespace fpt {

/// The configuration a mode actually runs: fpt_no_selection keeps every
/// token (ratio 1). Other modes leave the config unchanged.
FptConfig effective_config(const FptConfig& cfg, TrainMode mode);

struct FptModel {
  TrainMode mode = TrainMode::fpt;
  FptConfig config;  // effective for `mode`
  std::optional<Backbone<float>> backbone;  // absent in side_only
  SideNetwork<float> side;

  /// Side network seeded from `seed`; the backbone comes from the config.
  static FptModel create(const FptConfig& cfg, TrainMode mode, std::uint64_t seed);

  /// Backbone tensors first, then the side network's.
  std::vector<NamedTensor<float>> named_tensors() const;
  std::vector<NamedTensor<float>> learnable() const;
  std::size_t side_image_size() const { return side.dims.image_size; }
};

/// Frozen-path features for the samples at `indices` of a split.
using FeatureProvider = std::function<std::vector<LayerFusionFeatures<float>>(
    const Split& split, std::span<const std::size_t> indices)>;

/// Recomputes the backbone on resized, unaugmented high-resolution inputs.
FeatureProvider live_features(const Backbone<float>& backbone, const FptConfig& cfg,
                              const Normalizer& norm);
/// Serves features from a published cache, addressed by sample id.
FeatureProvider cached_features(std::shared_ptr<const FeatureCache> cache);

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> val_auc;
};

struct TrainReport {
  std::string mode;
  std::uint64_t seed = 0;
  std::uint64_t config_digest = 0;
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  int best_epoch = -1;
  std::optional<double> best_val_auc;
  std::string best_checkpoint;
  std::uint64_t learnable_params = 0;
  std::uint64_t total_params = 0;
  MemoryEstimate memory;
  std::uint64_t full_finetune_memory = 0;

  nlohmann::json to_json() const;
};

struct TrainOptions {
  /// Stop after this many optimizer steps; 0 runs every epoch.
  std::size_t max_steps = 0;
  /// Score the validation split after each epoch and keep the best weights.
  bool validate = true;
  std::function<void(std::size_t step, double loss)> on_step;
};

/// Trains the learnable tensors of `model` in place. The validation provider
/// may be empty when `options.validate` is off. Throws NanLossError on a
/// non-finite loss.
TrainReport train(FptModel& model, const Split& train_split, const FeatureProvider& train_features,
                  const Split& val_split, const FeatureProvider& val_features,
                  const Normalizer& norm, const TrainOptions& options = {});

struct EvalResult {
  double auc = 0.0;
  std::vector<double> probabilities;  // (n, classes)
  std::vector<int> labels;
};

/// Inference on unaugmented low-resolution inputs; no parameter changes.
EvalResult evaluate(const FptModel& model, const Split& split, const FeatureProvider& features,
                    const Normalizer& norm, std::size_t batch_size = 32);

/// Bitwise copy of every backbone tensor, taken before training.
struct FreezeSnapshot {
  std::vector<std::pair<std::string, std::vector<float>>> tensors;
};
FreezeSnapshot snapshot_backbone(const FptModel& model);

struct FreezeReport {
  bool passed = true;
  std::vector<std::string> failures;  // one line per offending tensor
};

/// Fails for any backbone tensor whose values differ from the snapshot, that
/// holds a gradient buffer, or that is flagged learnable. Without a backbone
/// the check passes vacuously.
FreezeReport freeze_check(const FptModel& model, const FreezeSnapshot& snapshot);

/// Names of tensors currently holding a gradient buffer.
std::vector<std::string> tensors_with_grad(const FptModel& model);

}  // namespace fpt

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "fpt/backbone.hpp"
#include "fpt/config.hpp"

namespace fpt {

/// Supervised warm-up of the frozen backbone on a separate synthetic corpus of
/// small crops. The result is written through the weight import path and then
/// used frozen.
struct PretrainOptions {
  int source_size = 32;  // crop side in pixels, a multiple of the patch size
  int samples = 2000;
  int epochs = 6;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::uint64_t seed = 4242;
};

struct PretrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
};

/// Backbone config the pretrained weights belong to: `cfg` with
/// pretrain_grid set to source_size / patch.
BackboneConfig pretrained_backbone_config(const BackboneConfig& cfg, const PretrainOptions& opts);

/// Trains patch embedding, positional table and blocks (plus a throwaway
/// norm and head) on source crops whose class count, cue size and noise come
/// from cfg.data.synth. Returns frozen weights. Deterministic per options.
BackboneWeights<float> pretrain_backbone(const FptConfig& cfg, const PretrainOptions& opts,
                                         PretrainReport* report = nullptr);

}  // namespace fpt

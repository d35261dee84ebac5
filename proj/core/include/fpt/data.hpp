// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fpt/config.hpp"
#include "fpt/image.hpp"
#include "fpt/random.hpp"
#include "fpt/tensor.hpp"

namespace fpt {

struct Sample {
  std::string id;
  int label = 0;
  /// Source file; used when `image` has not been decoded yet.
  std::filesystem::path path;
  Image image;

  bool loaded() const { return image.width > 0; }
};

struct Split {
  std::string name;
  std::vector<Sample> samples;
};

struct Dataset {
  std::vector<std::string> class_names;
  Split train{"train", {}};
  Split val{"val", {}};
  Split test{"test", {}};

  const Split& split(std::string_view name) const;
  Split& split(std::string_view name);
};

inline constexpr std::array<std::string_view, 3> kSplitNames = {"train", "val", "test"};

/// Decoded pixels of a sample, reading its file when needed. Throws IoError.
Image load_sample_image(const Sample& sample);
/// Decodes every sample in place. Throws IoError on the first failure.
void load_images(Split& split);

/// Texture classes of the synthetic cue, in label order.
inline constexpr std::array<std::string_view, 4> kSynthClassNames = {"hstripes", "vstripes",
                                                                     "checker", "flat"};

/// Noisy gray canvas with one small textured cue whose texture is the label.
/// Throws ConfigError for an invalid spec (cue larger than the canvas, fewer
/// than 2 or more than 4 classes, negative counts).
Dataset synth_generate(const SynthSpec& spec);
/// Renders one synthetic sample; exposed for tests.
Image synth_image(const SynthSpec& spec, int label, std::uint64_t sample_seed);

/// `<root>/<split>/<class>/<id>.png` plus `<root>/splits.json`.
void write_dataset(const Dataset& data, const std::filesystem::path& root);
/// Reads `splits.json` when present; otherwise scans `<root>/<split>/<class>/`.
/// A root holding only class folders is partitioned 70/10/20 with `seed`.
/// Images stay undecoded unless `decode` is set.
Dataset read_dataset(const std::filesystem::path& root, bool decode = true,
                     std::uint64_t seed = 0);

/// Random 70/10/20 style partition of n items; fractions must sum to 1.
std::array<std::vector<std::size_t>, 3> partition_indices(std::size_t n, std::uint64_t seed,
                                                          std::array<double, 3> fractions = {
                                                              0.7, 0.1, 0.2});

struct AugmentOptions {
  double flip_probability = 0.5;
  double min_scale = 0.8;
  double max_scale = 1.0;
  /// Overrides for tests: a fixed flip decision and a fixed area scale.
  std::optional<bool> force_flip;
  std::optional<double> force_scale;
};

/// Side-network input: random resized square crop covering `scale` of the
/// area, resized to `target`, then a horizontal flip with probability 0.5.
Image augment_low(const Image& image, std::size_t target, Rng& rng,
                  const AugmentOptions& options = {});

/// Per-channel statistics in [0, 1] pixel units.
struct Normalizer {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

Normalizer channel_stats(const Split& split);
/// The configured statistics, or the training split's when unset.
Normalizer resolve_normalizer(const FptConfig& cfg, const Split& train);
/// Writes `norm` into the config so digests and cache keys cover it.
void pin_normalizer(FptConfig& cfg, const Normalizer& norm);

/// Equal-size images -> (B, 3, H, W) float tensor, (p / 255 - mean) / std.
Tensor<float> to_tensor(std::span<const Image> images, const Normalizer& norm);

/// Digest over ids, labels and pixels of a split.
std::uint64_t split_fingerprint(const Split& split);

}  // namespace fpt

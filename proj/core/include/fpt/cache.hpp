// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpt/backbone.hpp"
#include "fpt/config.hpp"
#include "fpt/data.hpp"
#include "fpt/selection.hpp"

namespace fpt {

inline constexpr std::uint32_t kCacheFormatVersion = 1;

/// Digest of every setting that changes cached bytes: input resolution, patch
/// size, backbone shape and weights, normalization, selection ratio and rule.
/// Side-network, prompt and optimizer settings are excluded.
std::uint64_t cache_config_hash(const FptConfig& cfg, std::uint64_t backbone_identity);

/// Per-layer selected frozen features for a batch of high-resolution images,
/// as consumed by the side network. Shared by the cache builder and the live
/// path so both produce the same bytes.
std::vector<LayerFusionFeatures<float>> frozen_features(const Backbone<float>& backbone,
                                                        const Tensor<float>& images_high,
                                                        const SelectionConfig& selection);

struct CachedLayer {
  std::vector<std::uint32_t> indices;  // S_sel, ascending
  std::vector<float> keys;             // (S_sel, h_M, d_head)
  std::vector<float> values;
};

struct FeatureCacheEntry {
  std::string sample_id;
  std::uint64_t config_hash = 0;
  std::vector<CachedLayer> layers;
};

struct CacheManifest {
  std::uint32_t version = kCacheFormatVersion;
  std::uint64_t config_hash = 0;
  std::uint64_t config_digest = 0;
  std::uint64_t dataset_fingerprint = 0;
  std::string split;
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::size_t selected = 0;  // S_sel, identical for every layer
  std::uint64_t entry_bytes = 0;
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<std::uint64_t> offsets;  // relative to the payload start
  std::vector<std::string> skipped;

  nlohmann::json to_json() const;
  static CacheManifest from_json(const nlohmann::json& j);
};

/// Bytes per sample: L * S_sel * (4 + 2 * h_M * d_head * 4).
std::uint64_t cache_entry_bytes(std::size_t layers, std::size_t selected, std::size_t heads,
                                std::size_t head_dim);

std::filesystem::path cache_data_path(const std::filesystem::path& dir, std::string_view split);
std::filesystem::path cache_manifest_path(const std::filesystem::path& dir, std::string_view split);

struct CacheBuildOptions {
  std::size_t batch_size = 32;
  /// 0 uses the hardware concurrency.
  std::size_t threads = 0;
  /// Replace an existing cache instead of failing with CacheExistsError.
  bool force = false;
};

struct CacheBuildResult {
  CacheManifest manifest;
  std::uint64_t file_bytes = 0;
};

/// Writes `<dir>/<split>.fptc` and its sidecar `<split>.manifest.json`.
/// High-res inputs are the stored images resized to the configured resolution
/// with no augmentation. Unreadable samples are skipped and listed; an I/O
/// failure removes any partial output.
CacheBuildResult build_cache(const Split& split, const FptConfig& cfg,
                             const Backbone<float>& backbone, const Normalizer& norm,
                             const std::filesystem::path& dir, const CacheBuildOptions& options = {});

/// Read-only view of one published cache file.
class FeatureCache {
 public:
  /// Throws StaleCacheError when the file is missing, truncated, or was built
  /// for a different configuration hash.
  static FeatureCache open(const std::filesystem::path& dir, std::string_view split,
                           std::uint64_t expected_hash);

  const CacheManifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.ids.size(); }
  bool contains(const std::string& id) const { return index_.contains(id); }
  std::size_t index_of(const std::string& id) const;

  FeatureCacheEntry load_entry(const std::string& id) const;
  FeatureCacheEntry load_entry(std::size_t index) const;

  /// Stacks entries into per-layer batched features (B, h_M, S_sel, d_head).
  std::vector<LayerFusionFeatures<float>> batch(std::span<const std::size_t> indices) const;

 private:
  CacheManifest manifest_;
  std::vector<char> payload_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fpt

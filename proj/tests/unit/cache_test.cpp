// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fpt/cache.hpp"
#include "fpt/errors.hpp"
#include "fpt/selftest.hpp"

using namespace fpt;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  FptConfig cfg = tiny_config();
  Dataset data;
  Normalizer norm;
  Backbone<float> backbone;
  fs::path dir;

  explicit Fixture(const std::string& name)
      : data(synth_generate(cfg.data.synth)),
        norm(channel_stats(data.train)),
        backbone(Backbone<float>::create(cfg.backbone)),
        dir(fs::temp_directory_path() / ("fpt_cache_test_" + name)) {
    pin_normalizer(cfg, norm);
    fs::remove_all(dir);
  }
  ~Fixture() { fs::remove_all(dir); }

  std::uint64_t hash() const { return cache_config_hash(cfg, backbone.identity()); }
  CacheBuildResult build(CacheBuildOptions opts = {}) {
    return build_cache(data.train, cfg, backbone, norm, dir, opts);
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Cache, RoundTripEqualsLiveFeatures) {
  Fixture f("roundtrip");
  const auto built = f.build();
  EXPECT_EQ(built.manifest.ids.size(), f.data.train.samples.size());
  const auto cache = FeatureCache::open(f.dir, "train", f.hash());

  std::vector<Image> imgs;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < 3; ++i) {
    imgs.push_back(resize_bilinear(f.data.train.samples[i].image, 32));
    rows.push_back(cache.index_of(f.data.train.samples[i].id));
  }
  const auto live = frozen_features(f.backbone, to_tensor(imgs, f.norm), f.cfg.selection);
  const auto cached = cache.batch(rows);
  ASSERT_EQ(live.size(), cached.size());
  for (std::size_t l = 0; l < live.size(); ++l) {
    EXPECT_EQ(live[l].indices, cached[l].indices);
    ASSERT_EQ(live[l].keys.shape(), cached[l].keys.shape());
    for (std::size_t i = 0; i < live[l].keys.numel(); ++i) {
      ASSERT_EQ(live[l].keys[i], cached[l].keys[i]);
      ASSERT_EQ(live[l].values[i], cached[l].values[i]);
    }
  }
}

TEST(Cache, FileSizeMatchesLayout) {
  Fixture f("size");
  const auto built = f.build();
  // Per entry and layer: S u32 indices, then S*h*dh f32 keys and values.
  const std::size_t S = 1 + 4, L = 2, h = 2, dh = 8;
  const std::uint64_t entry = L * (S * 4 + 2 * S * h * dh * 4);
  EXPECT_EQ(cache_entry_bytes(L, S, h, dh), entry);
  EXPECT_EQ(built.manifest.entry_bytes, entry);
  const auto payload = entry * f.data.train.samples.size();
  EXPECT_GT(built.file_bytes, payload);
  EXPECT_EQ(fs::file_size(cache_data_path(f.dir, "train")), built.file_bytes);
  EXPECT_TRUE(fs::exists(cache_manifest_path(f.dir, "train")));
}

TEST(Cache, RandomAccessMatchesSequential) {
  Fixture f("random");
  f.build();
  const auto cache = FeatureCache::open(f.dir, "train", f.hash());
  const std::vector<std::size_t> fwd{0, 1, 2, 3};
  const std::vector<std::size_t> rev{3, 1, 0, 2};
  const auto a = cache.batch(fwd);
  const auto b = cache.batch(rev);
  for (std::size_t l = 0; l < a.size(); ++l) {
    const std::size_t h = a[l].heads, S = a[l].count, dh = a[l].head_dim;
    for (std::size_t k = 0; k < 4; ++k) {
      for (std::size_t hh = 0; hh < h; ++hh) {
        for (std::size_t i = 0; i < S * dh; ++i) {
          ASSERT_EQ(b[l].keys[(k * h + hh) * S * dh + i], a[l].keys[(rev[k] * h + hh) * S * dh + i]);
        }
      }
      for (std::size_t s = 0; s < S; ++s) EXPECT_EQ(b[l].indices[k * S + s], a[l].indices[rev[k] * S + s]);
    }
  }
  const auto by_index = cache.load_entry(std::size_t{2});
  const auto by_id = cache.load_entry(f.data.train.samples[2].id);
  EXPECT_EQ(by_index.sample_id, by_id.sample_id);
  EXPECT_EQ(by_index.layers[1].keys, by_id.layers[1].keys);
}

TEST(Cache, ThreadCountDoesNotChangeBytes) {
  Fixture f("threads");
  CacheBuildOptions one;
  one.threads = 1;
  one.batch_size = 3;
  f.build(one);
  const auto a = slurp(cache_data_path(f.dir, "train"));
  CacheBuildOptions many;
  many.threads = 4;
  many.batch_size = 2;
  many.force = true;
  f.build(many);
  EXPECT_EQ(a, slurp(cache_data_path(f.dir, "train")));
}

TEST(Cache, ExistingCacheNeedsForce) {
  Fixture f("exists");
  f.build();
  EXPECT_THROW(f.build(), CacheExistsError);
  CacheBuildOptions force;
  force.force = true;
  EXPECT_NO_THROW(f.build(force));
}

TEST(Cache, StaleHashMissingAndTruncatedAreRejected) {
  Fixture f("stale");
  EXPECT_THROW(FeatureCache::open(f.dir, "train", f.hash()), StaleCacheError);
  f.build();
  EXPECT_THROW(FeatureCache::open(f.dir, "train", f.hash() ^ 1), StaleCacheError);

  auto cfg2 = f.cfg;
  cfg2.selection.ratio = 0.5;
  EXPECT_NE(cache_config_hash(cfg2, f.backbone.identity()), f.hash());
  auto cfg3 = f.cfg;
  cfg3.train.lr = 0.5;
  EXPECT_EQ(cache_config_hash(cfg3, f.backbone.identity()), f.hash());

  const auto path = cache_data_path(f.dir, "train");
  fs::resize_file(path, fs::file_size(path) - 7);
  EXPECT_THROW(FeatureCache::open(f.dir, "train", f.hash()), StaleCacheError);
}

TEST(Cache, UnknownIdIsLookupError) {
  Fixture f("lookup");
  f.build();
  const auto cache = FeatureCache::open(f.dir, "train", f.hash());
  EXPECT_THROW(cache.index_of("nope"), LookupError);
}

TEST(Cache, ManifestJsonRoundTrip) {
  Fixture f("manifest");
  const auto built = f.build();
  const auto back = CacheManifest::from_json(built.manifest.to_json());
  EXPECT_EQ(back.ids, built.manifest.ids);
  EXPECT_EQ(back.offsets, built.manifest.offsets);
  EXPECT_EQ(back.config_hash, built.manifest.config_hash);
  auto broken = built.manifest.to_json();
  broken["offsets"][1] = 3;
  EXPECT_THROW(CacheManifest::from_json(broken), Error);
}

TEST(Cache, UnreadableSampleIsSkipped) {
  Fixture f("skip");
  Split split = f.data.train;
  split.samples[2].image = Image();
  split.samples[2].path = f.dir / "missing.png";
  const auto built = build_cache(split, f.cfg, f.backbone, f.norm, f.dir);
  EXPECT_EQ(built.manifest.skipped, (std::vector<std::string>{split.samples[2].id}));
  EXPECT_EQ(built.manifest.ids.size(), split.samples.size() - 1);
  EXPECT_FALSE(fs::exists(cache_data_path(f.dir, "train").string() + ".partial"));
}

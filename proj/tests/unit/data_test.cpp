// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "fpt/data.hpp"
#include "fpt/errors.hpp"

using namespace fpt;
namespace fs = std::filesystem;

namespace {

double luma(const Image& img, std::size_t y, std::size_t x) {
  return (img.at(0, y, x) + img.at(1, y, x) + img.at(2, y, x)) / 3.0;
}

// Finds the brightest cue-sized window, then reads the texture from the mean
// absolute difference along rows and along columns.
int classify_by_template(const Image& img, std::size_t cue) {
  double best = -1.0;
  std::size_t by = 0, bx = 0;
  for (std::size_t y = 0; y + cue <= img.height; ++y) {
    for (std::size_t x = 0; x + cue <= img.width; ++x) {
      double s = 0;
      for (std::size_t i = 0; i < cue; ++i) {
        for (std::size_t j = 0; j < cue; ++j) s += luma(img, y + i, x + j);
      }
      if (s > best) best = s, by = y, bx = x;
    }
  }
  double dx = 0, dy = 0;
  for (std::size_t i = 0; i < cue; ++i) {
    for (std::size_t j = 0; j + 1 < cue; ++j) {
      dx += std::abs(luma(img, by + i, bx + j + 1) - luma(img, by + i, bx + j));
      dy += std::abs(luma(img, by + j + 1, bx + i) - luma(img, by + j, bx + i));
    }
  }
  const double n = static_cast<double>(cue * (cue - 1));
  dx /= n;
  dy /= n;
  const double edge = 64.0;
  if (dy > edge && dx > edge) return 2;
  if (dy > edge) return 0;
  if (dx > edge) return 1;
  return 3;
}

double template_accuracy(const SynthSpec& spec, std::size_t low) {
  int right = 0;
  const int n = 60;
  for (int i = 0; i < n; ++i) {
    const int label = i % spec.num_classes;
    Image img = synth_image(spec, label, 1000 + static_cast<std::uint64_t>(i));
    if (low > 0) img = resize_bilinear(resize_bilinear(img, low), img.width);
    right += classify_by_template(img, static_cast<std::size_t>(spec.cue_size)) == label;
  }
  return right / static_cast<double>(n);
}

}  // namespace

TEST(Resize, AveragesTwoPixelsToOne) {
  Image img(2, 1);
  for (std::size_t c = 0; c < 3; ++c) {
    img.at(c, 0, 0) = 0;
    img.at(c, 0, 1) = 100;
  }
  const auto out = resize_bilinear(img, 1, 1);
  EXPECT_EQ(out.at(0, 0, 0), 50);
  EXPECT_EQ(out.at(2, 0, 0), 50);
}

TEST(Resize, SameSizeIsIdentityAndZeroThrows) {
  const auto img = synth_image(SynthSpec{32, 4, 4, 16.0, 1, 1, 1, 3}, 2, 5);
  EXPECT_EQ(resize_bilinear(img, 32), img);
  EXPECT_THROW(resize_bilinear(img, 0), Error);
}

TEST(Synth, DeterministicPerSeed) {
  SynthSpec spec;
  spec.train_count = 6;
  spec.val_count = 2;
  spec.test_count = 2;
  const auto a = synth_generate(spec);
  const auto b = synth_generate(spec);
  ASSERT_EQ(a.train.samples.size(), 6u);
  EXPECT_EQ(a.train.samples[3].image, b.train.samples[3].image);
  EXPECT_EQ(split_fingerprint(a.test), split_fingerprint(b.test));
  spec.seed += 1;
  EXPECT_NE(split_fingerprint(synth_generate(spec).test), split_fingerprint(a.test));
  EXPECT_EQ(a.class_names, (std::vector<std::string>{"hstripes", "vstripes", "checker", "flat"}));
}

TEST(Synth, InvalidSpecThrows) {
  SynthSpec spec;
  spec.cue_size = 200;
  EXPECT_THROW(synth_generate(spec), ConfigError);
  spec = SynthSpec{};
  spec.num_classes = 5;
  EXPECT_THROW(synth_generate(spec), ConfigError);
}

TEST(Synth, CueVisibleAtHighResolutionOnly) {
  const SynthSpec spec;
  EXPECT_GT(template_accuracy(spec, 0), 0.95);
  EXPECT_LT(template_accuracy(spec, 32), 0.6);
}

TEST(Dataset, WriteReadRoundTrip) {
  SynthSpec spec;
  spec.canvas = 32;
  spec.train_count = 4;
  spec.val_count = 2;
  spec.test_count = 2;
  const auto data = synth_generate(spec);
  const auto root = fs::temp_directory_path() / "fpt_data_roundtrip";
  fs::remove_all(root);
  write_dataset(data, root);
  const auto back = read_dataset(root, true);
  EXPECT_EQ(back.class_names, data.class_names);
  for (auto name : kSplitNames) {
    EXPECT_EQ(split_fingerprint(back.split(name)), split_fingerprint(data.split(name))) << name;
  }
  const auto lazy = read_dataset(root, false);
  EXPECT_FALSE(lazy.train.samples[0].loaded());
  EXPECT_EQ(load_sample_image(lazy.train.samples[0]), data.train.samples[0].image);
  fs::remove_all(root);
}

TEST(Dataset, ClassFoldersArePartitioned) {
  const auto root = fs::temp_directory_path() / "fpt_data_folders";
  fs::remove_all(root);
  SynthSpec spec;
  spec.canvas = 16;
  for (int c = 0; c < 2; ++c) {
    fs::create_directories(root / (c == 0 ? "a" : "b"));
    for (int i = 0; i < 10; ++i) {
      write_png(root / (c == 0 ? "a" : "b") / ("img" + std::to_string(i) + ".png"),
                synth_image(spec, c, static_cast<std::uint64_t>(i)));
    }
  }
  const auto data = read_dataset(root, false, 3);
  EXPECT_EQ(data.class_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(data.train.samples.size() + data.val.samples.size() + data.test.samples.size(), 20u);
  fs::remove_all(root);
}

TEST(Partition, SeventyTenTwentyAndDisjoint) {
  const auto parts = partition_indices(100, 9);
  EXPECT_EQ(parts[0].size(), 70u);
  EXPECT_EQ(parts[1].size(), 10u);
  EXPECT_EQ(parts[2].size(), 20u);
  std::set<std::size_t> all;
  for (const auto& p : parts) all.insert(p.begin(), p.end());
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(partition_indices(100, 9), parts);
  EXPECT_THROW(partition_indices(10, 1, {0.5, 0.1, 0.1}), Error);
}

TEST(Augment, DeterministicPerSeed) {
  const auto img = synth_image(SynthSpec{}, 0, 11);
  Rng a(4), b(4);
  EXPECT_EQ(augment_low(img, 32, a), augment_low(img, 32, b));
  const auto out = augment_low(img, 32, a);
  EXPECT_EQ(out.width, 32u);
  EXPECT_EQ(out.height, 32u);
}

TEST(Augment, ForcingFlipKeepsCropStream) {
  const auto img = synth_image(SynthSpec{}, 1, 12);
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    AugmentOptions plain;
    plain.force_flip = false;
    AugmentOptions flipped;
    flipped.force_flip = true;
    Rng a(seed), b(seed);
    EXPECT_EQ(flip_horizontal(augment_low(img, 32, a, plain)), augment_low(img, 32, b, flipped));
  }
  AugmentOptions whole;
  whole.force_scale = 1.0;
  whole.force_flip = false;
  Rng r(1);
  EXPECT_EQ(augment_low(img, 32, r, whole), resize_bilinear(img, 32));
}

TEST(Normalize, ChannelStatsAndTensor) {
  Split split;
  Image a(1, 1), b(1, 1);
  a.pixels = {0, 51, 255};
  b.pixels = {255, 51, 255};
  split.samples = {Sample{"a", 0, {}, a}, Sample{"b", 1, {}, b}};
  const auto norm = channel_stats(split);
  EXPECT_NEAR(norm.mean[0], 0.5, 1e-12);
  EXPECT_NEAR(norm.std[0], 0.5, 1e-12);
  EXPECT_NEAR(norm.mean[1], 0.2, 1e-12);

  Normalizer fixed;
  fixed.mean = {0.5, 0.0, 1.0};
  fixed.std = {0.5, 1.0, 2.0};
  const std::vector<Image> imgs{a, b};
  const auto t = to_tensor(imgs, fixed);
  EXPECT_EQ(t.shape(), (Shape{2, 3, 1, 1}));
  EXPECT_NEAR(t[0], -1.0, 1e-6);
  EXPECT_NEAR(t[1], 0.2, 1e-6);
  EXPECT_NEAR(t[2], 0.0, 1e-6);
  EXPECT_NEAR(t[3], 1.0, 1e-6);
}

TEST(Normalize, PinnedStatsWinOverTrainingSplit) {
  FptConfig cfg;
  Normalizer n;
  n.mean = {0.1, 0.2, 0.3};
  n.std = {0.4, 0.5, 0.6};
  pin_normalizer(cfg, n);
  const auto got = resolve_normalizer(cfg, Split{});
  EXPECT_EQ(got.mean, n.mean);
  EXPECT_EQ(got.std, n.std);
}

TEST(Png, RoundTripAndMissingFile) {
  const auto img = synth_image(SynthSpec{32, 4, 4, 16.0, 1, 1, 1, 3}, 2, 9);
  const auto path = fs::temp_directory_path() / "fpt_png_test.png";
  write_png(path, img);
  EXPECT_EQ(read_png(path), img);
  fs::remove(path);
  EXPECT_THROW(read_png(path), IoError);
}

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fpt/config.hpp"
#include "fpt/errors.hpp"
#include "fpt/selftest.hpp"

using namespace fpt;

TEST(Config, JsonRoundTripIsIdempotent) {
  auto cfg = FptConfig::desk();
  cfg.data.norm_mean = std::array<double, 3>{0.1, 0.2, 0.3};
  cfg.data.norm_std = std::array<double, 3>{0.4, 0.5, 0.6};
  cfg.train.mode = TrainMode::fpt_symmetric;
  const auto j = to_json(cfg);
  const auto back = config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(config_digest(back), config_digest(cfg));
}

TEST(Config, FileRoundTripAndMalformed) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "fpt_config_test.json").string();
  save_config(tiny_config(), path);
  EXPECT_EQ(config_digest(load_config(path)), config_digest(tiny_config()));
  std::ofstream(path) << "{ not json";
  EXPECT_THROW(load_config(path), ConfigError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_config(path), IoError);
}

TEST(Config, UnknownKeysAndVersionsRejected) {
  auto j = to_json(FptConfig::desk());
  j["side"]["prompt_count"] = 3;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(FptConfig::desk());
  j["extra"] = true;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(FptConfig::desk());
  j["schema_version"] = 99;
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Config, CrossFieldValidation) {
  auto bad = [](auto edit) {
    auto cfg = FptConfig::desk();
    edit(cfg);
    EXPECT_THROW(cfg.validate(), ConfigError);
  };
  bad([](FptConfig& c) { c.backbone.image_size_high = 100; });
  bad([](FptConfig& c) { c.backbone.heads = 5; });
  bad([](FptConfig& c) { c.side.reduction_factor = 7; });
  bad([](FptConfig& c) { c.side.image_size_low = 30; });
  bad([](FptConfig& c) { c.selection.ratio = 0.0; });
  bad([](FptConfig& c) { c.selection.ratio = 1.5; });
  bad([](FptConfig& c) { c.selection.source_layer = 4; });
  bad([](FptConfig& c) { c.side.num_classes = 3; });
  bad([](FptConfig& c) { c.train.batch_size = 0; });
  bad([](FptConfig& c) { c.side.dropout = 1.0; });
  bad([](FptConfig& c) { c.data.norm_mean = std::array<double, 3>{0, 0, 0}; });
}

TEST(Config, PresetsAreValid) {
  EXPECT_NO_THROW(FptConfig::desk().validate());
  EXPECT_NO_THROW(FptConfig::vit_base().validate());
  EXPECT_NO_THROW(tiny_config().validate());
  const auto vb = FptConfig::vit_base();
  EXPECT_EQ(vb.backbone.image_size_high, 512);
  EXPECT_EQ(vb.side.image_size_low, 224);
  EXPECT_EQ(vb.side_dim(), 96);
  EXPECT_EQ(vb.backbone.tokens(), 1025);
}

TEST(Config, DigestTracksEveryField) {
  const auto base = config_digest(FptConfig::desk());
  auto cfg = FptConfig::desk();
  cfg.train.lr = 2e-3;
  EXPECT_NE(config_digest(cfg), base);
  cfg = FptConfig::desk();
  cfg.backbone.weights_path = "w.fptw";
  EXPECT_NE(config_digest(cfg), base);
  EXPECT_EQ(config_digest(FptConfig::desk()), base);
}

TEST(Config, ModeNames) {
  for (auto m : {TrainMode::fpt, TrainMode::side_only, TrainMode::fpt_no_selection, TrainMode::fpt_symmetric}) {
    EXPECT_EQ(parse_train_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_train_mode("full"), ConfigError);
}

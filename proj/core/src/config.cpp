// SPDX-License-Identifier: Apache-2.0
#include "fpt/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "fpt/errors.hpp"
#include "fpt/hash.hpp"

namespace fpt {

using nlohmann::json;

std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::fpt:
      return "fpt";
    case TrainMode::side_only:
      return "side_only";
    case TrainMode::fpt_no_selection:
      return "fpt_no_selection";
    case TrainMode::fpt_symmetric:
      return "fpt_symmetric";
  }
  return "fpt";
}

TrainMode parse_train_mode(std::string_view text) {
  for (auto m : {TrainMode::fpt, TrainMode::side_only, TrainMode::fpt_no_selection,
                 TrainMode::fpt_symmetric}) {
    if (to_string(m) == text) {
      return m;
    }
  }
  throw ConfigError("unknown train mode '" + std::string(text) + "'");
}

int FptConfig::side_heads() const {
  return side.heads > 0 ? side.heads : std::max(1, backbone.heads / 2);
}

namespace {

void check(bool ok, const std::string& what) {
  if (!ok) {
    throw ConfigError(what);
  }
}

}  // namespace

void FptConfig::validate() const {
  const auto& b = backbone;
  check(b.patch_size > 0, "backbone.patch_size must be positive");
  check(b.image_size_high > 0 && b.image_size_high % b.patch_size == 0,
        "backbone.image_size_high must be a positive multiple of patch_size");
  check(b.dim > 0 && b.heads > 0 && b.dim % b.heads == 0,
        "backbone.dim must be divisible by backbone.heads");
  check(b.layers > 0, "backbone.layers must be positive");
  check(b.mlp_ratio > 0, "backbone.mlp_ratio must be positive");
  check(b.pretrain_grid >= 1, "backbone.pretrain_grid must be >= 1");

  check(side.reduction_factor > 0 && b.dim % side.reduction_factor == 0,
        "backbone.dim must be divisible by side.reduction_factor");
  check(side_dim() >= 2, "side width (dim / reduction_factor) must be >= 2");
  check(side.image_size_low > 0 && side.image_size_low % b.patch_size == 0,
        "side.image_size_low must be a positive multiple of patch_size");
  check(side.heads >= 0, "side.heads must be >= 0");
  check(side_dim() % side_heads() == 0, "side width must be divisible by side heads");
  check(side.num_prompts >= 0, "side.num_prompts must be >= 0");
  check(side.num_classes >= 2, "side.num_classes must be >= 2");
  check(side.dropout >= 0.0 && side.dropout < 1.0, "side.dropout must be in [0, 1)");

  check(selection.ratio > 0.0 && selection.ratio <= 1.0, "selection.ratio must be in (0, 1]");
  check(selection.source_layer >= -1 && selection.source_layer < b.layers,
        "selection.source_layer must be -1 or a valid layer index");

  const auto& s = data.synth;
  check(s.canvas > 0 && s.cue_size > 0, "data.synth sizes must be positive");
  check(s.cue_size <= s.canvas, "data.synth.cue_size larger than canvas");
  check(s.train_count >= 0 && s.val_count >= 0 && s.test_count >= 0,
        "data.synth counts must be >= 0");
  check(s.num_classes == side.num_classes, "data.synth.num_classes must equal side.num_classes");
  if (data.norm_std) {
    for (double v : *data.norm_std) {
      check(v > 0.0, "data.norm_std entries must be positive");
    }
  }
  check(data.norm_mean.has_value() == data.norm_std.has_value(),
        "data.norm_mean and data.norm_std must be given together");

  check(train.epochs >= 0, "train.epochs must be >= 0");
  check(train.batch_size > 0, "train.batch_size must be positive");
  check(train.lr >= 0.0, "train.lr must be >= 0");
  check(train.weight_decay >= 0.0, "train.weight_decay must be >= 0");
  check(train.beta1 >= 0.0 && train.beta1 < 1.0 && train.beta2 >= 0.0 && train.beta2 < 1.0,
        "train betas must be in [0, 1)");
  check(train.eps > 0.0, "train.eps must be positive");
}

FptConfig FptConfig::desk() { return FptConfig{}; }

FptConfig FptConfig::vit_base() {
  FptConfig cfg;
  cfg.backbone.image_size_high = 512;
  cfg.backbone.patch_size = 16;
  cfg.backbone.dim = 768;
  cfg.backbone.layers = 12;
  cfg.backbone.heads = 12;
  cfg.backbone.mlp_ratio = 4;
  cfg.backbone.pretrain_grid = 14;
  cfg.side.image_size_low = 224;
  cfg.side.reduction_factor = 8;
  cfg.side.num_prompts = 16;
  cfg.selection.ratio = 0.2;
  cfg.data.synth.canvas = 512;
  cfg.data.synth.cue_size = 16;
  cfg.train.epochs = 20;
  cfg.train.batch_size = 16;
  return cfg;
}

json to_json(const FptConfig& cfg) {
  json j;
  j["schema_version"] = FptConfig::kSchemaVersion;
  const auto& b = cfg.backbone;
  j["backbone"] = {{"image_size_high", b.image_size_high}, {"patch_size", b.patch_size},
                   {"dim", b.dim},
                   {"layers", b.layers},
                   {"heads", b.heads},
                   {"mlp_ratio", b.mlp_ratio},
                   {"pretrain_grid", b.pretrain_grid},
                   {"weight_seed", b.weight_seed},
                   {"weights_path", b.weights_path}};
  const auto& s = cfg.side;
  j["side"] = {{"image_size_low", s.image_size_low}, {"reduction_factor", s.reduction_factor},
               {"heads", s.heads},
               {"num_prompts", s.num_prompts},
               {"shared_prompts", s.shared_prompts},
               {"num_classes", s.num_classes},
               {"dropout", s.dropout}};
  j["selection"] = {{"ratio", cfg.selection.ratio},
                    {"keep_cls", cfg.selection.keep_cls},
                    {"source_layer", cfg.selection.source_layer}};
  const auto& sy = cfg.data.synth;
  json data = {{"synth",
                {{"canvas", sy.canvas},
                 {"cue_size", sy.cue_size},
                 {"num_classes", sy.num_classes},
                 {"noise", sy.noise},
                 {"train_count", sy.train_count},
                 {"val_count", sy.val_count},
                 {"test_count", sy.test_count},
                 {"seed", sy.seed}}}};
  if (cfg.data.norm_mean) {
    data["norm_mean"] = *cfg.data.norm_mean;
    data["norm_std"] = *cfg.data.norm_std;
  }
  j["data"] = data;
  const auto& t = cfg.train;
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"lr", t.lr},
                {"weight_decay", t.weight_decay},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"eps", t.eps},
                {"seed", t.seed},
                {"mode", std::string(to_string(t.mode))},
                {"use_cache", t.use_cache}};
  return j;
}

namespace {

void reject_unknown(const json& obj, const std::string& where, std::set<std::string> allowed) {
  if (!obj.is_object()) {
    throw ConfigError(where + " must be an object");
  }
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

template <typename V>
void read(const json& obj, const char* key, V& out, const std::string& where) {
  if (!obj.contains(key)) {
    return;
  }
  try {
    out = obj.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + where + "." + key + "': " + e.what());
  }
}

}  // namespace

FptConfig config_from_json(const json& j) {
  FptConfig cfg;
  reject_unknown(j, "", {"schema_version", "backbone", "side", "selection", "data", "train"});
  int version = FptConfig::kSchemaVersion;
  read(j, "schema_version", version, "");
  if (version != FptConfig::kSchemaVersion) {
    throw ConfigError("unsupported schema_version " + std::to_string(version));
  }
  if (j.contains("backbone")) {
    const auto& o = j["backbone"];
    reject_unknown(o, "backbone",
                   {"image_size_high", "patch_size", "dim", "layers", "heads", "mlp_ratio",
                    "pretrain_grid", "weight_seed", "weights_path"});
    auto& b = cfg.backbone;
    read(o, "image_size_high", b.image_size_high, "backbone");
    read(o, "patch_size", b.patch_size, "backbone");
    read(o, "dim", b.dim, "backbone");
    read(o, "layers", b.layers, "backbone");
    read(o, "heads", b.heads, "backbone");
    read(o, "mlp_ratio", b.mlp_ratio, "backbone");
    read(o, "pretrain_grid", b.pretrain_grid, "backbone");
    read(o, "weight_seed", b.weight_seed, "backbone");
    read(o, "weights_path", b.weights_path, "backbone");
  }
  if (j.contains("side")) {
    const auto& o = j["side"];
    reject_unknown(o, "side",
                   {"image_size_low", "reduction_factor", "heads", "num_prompts", "shared_prompts",
                    "num_classes", "dropout"});
    auto& s = cfg.side;
    read(o, "image_size_low", s.image_size_low, "side");
    read(o, "reduction_factor", s.reduction_factor, "side");
    read(o, "heads", s.heads, "side");
    read(o, "num_prompts", s.num_prompts, "side");
    read(o, "shared_prompts", s.shared_prompts, "side");
    read(o, "num_classes", s.num_classes, "side");
    read(o, "dropout", s.dropout, "side");
  }
  if (j.contains("selection")) {
    const auto& o = j["selection"];
    reject_unknown(o, "selection", {"ratio", "keep_cls", "source_layer"});
    read(o, "ratio", cfg.selection.ratio, "selection");
    read(o, "keep_cls", cfg.selection.keep_cls, "selection");
    read(o, "source_layer", cfg.selection.source_layer, "selection");
  }
  if (j.contains("data")) {
    const auto& o = j["data"];
    reject_unknown(o, "data", {"synth", "norm_mean", "norm_std"});
    if (o.contains("synth")) {
      const auto& so = o["synth"];
      reject_unknown(so, "data.synth",
                     {"canvas", "cue_size", "num_classes", "noise", "train_count", "val_count",
                      "test_count", "seed"});
      auto& sy = cfg.data.synth;
      read(so, "canvas", sy.canvas, "data.synth");
      read(so, "cue_size", sy.cue_size, "data.synth");
      read(so, "num_classes", sy.num_classes, "data.synth");
      read(so, "noise", sy.noise, "data.synth");
      read(so, "train_count", sy.train_count, "data.synth");
      read(so, "val_count", sy.val_count, "data.synth");
      read(so, "test_count", sy.test_count, "data.synth");
      read(so, "seed", sy.seed, "data.synth");
    }
    if (o.contains("norm_mean")) {
      std::array<double, 3> v{};
      read(o, "norm_mean", v, "data");
      cfg.data.norm_mean = v;
    }
    if (o.contains("norm_std")) {
      std::array<double, 3> v{};
      read(o, "norm_std", v, "data");
      cfg.data.norm_std = v;
    }
  }
  if (j.contains("train")) {
    const auto& o = j["train"];
    reject_unknown(o, "train",
                   {"epochs", "batch_size", "lr", "weight_decay", "beta1", "beta2", "eps", "seed",
                    "mode", "use_cache"});
    auto& t = cfg.train;
    read(o, "epochs", t.epochs, "train");
    read(o, "batch_size", t.batch_size, "train");
    read(o, "lr", t.lr, "train");
    read(o, "weight_decay", t.weight_decay, "train");
    read(o, "beta1", t.beta1, "train");
    read(o, "beta2", t.beta2, "train");
    read(o, "eps", t.eps, "train");
    read(o, "seed", t.seed, "train");
    read(o, "use_cache", t.use_cache, "train");
    if (o.contains("mode")) {
      std::string mode;
      read(o, "mode", mode, "train");
      t.mode = parse_train_mode(mode);
    }
  }
  cfg.validate();
  return cfg;
}

FptConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open config '" + path + "'");
  }
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

void save_config(const FptConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write config '" + path + "'");
  }
  out << to_json(cfg).dump(2) << '\n';
}

std::uint64_t config_digest(const FptConfig& cfg) {
  return Fnv1a().str(to_json(cfg).dump()).digest();
}

}  // namespace fpt

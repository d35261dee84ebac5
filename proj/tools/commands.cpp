// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "fpt/errors.hpp"
#include "fpt/hash.hpp"
#include "fpt/pretrain.hpp"
#include "fpt/selftest.hpp"
#include "fpt/tensor_archive.hpp"
#include "fpt/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fpt::cli {

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIoError;
  } catch (const StaleCacheError& e) {
    std::cerr << "cache error: " << e.what() << "\n";
    return kCacheError;
  } catch (const NanLossError& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kNanLoss;
  } catch (const UndefinedAucError& e) {
    std::cerr << "undefined AUC: " << e.what() << "\n";
    return kFailure;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}

namespace {

FptConfig apply_overrides(FptConfig cfg, const RunFlags& f) {
  if (f.mode) cfg.train.mode = parse_train_mode(*f.mode);
  if (f.epochs) cfg.train.epochs = *f.epochs;
  if (f.batch_size) cfg.train.batch_size = *f.batch_size;
  if (f.lr) cfg.train.lr = *f.lr;
  if (f.ratio) cfg.selection.ratio = *f.ratio;
  if (f.seed) cfg.train.seed = *f.seed;
  if (f.weights) cfg.backbone.weights_path = *f.weights;
  if (f.pretrain_grid) cfg.backbone.pretrain_grid = *f.pretrain_grid;
  if (f.no_cache) cfg.train.use_cache = false;
  cfg.validate();
  return cfg;
}

FptConfig base_config(const std::string& path) {
  return path.empty() ? FptConfig::desk() : load_config(path);
}

FptConfig run_config(const RunFlags& f) { return apply_overrides(base_config(f.config_path), f); }

Dataset load_data(const RunFlags& f, const FptConfig& cfg) {
  Dataset data = f.data_root.empty() ? synth_generate(cfg.data.synth)
                                     : read_dataset(f.data_root, true, cfg.data.synth.seed);
  if (static_cast<int>(data.class_names.size()) != cfg.side.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.class_names.size()) +
                      " classes, config expects " + std::to_string(cfg.side.num_classes));
  }
  return data;
}

// Resolves normalization from the training split and pins it into the config
// so every command hashes the same settings.
Normalizer pin_norm(FptConfig& cfg, const Dataset& data) {
  const auto norm = resolve_normalizer(cfg, data.train);
  pin_normalizer(cfg, norm);
  return norm;
}

fs::path cache_root(const RunFlags& f) {
  if (!f.cache_dir.empty()) return f.cache_dir;
  if (const char* env = std::getenv("FPT_CACHE_DIR"); env && *env) return env;
  return "fpt-cache";
}

fs::path cache_dir_for(const RunFlags& f, const FptModel& model) {
  return cache_root(f) /
         hex64(cache_config_hash(model.config, model.backbone->identity()));
}

bool needs_features(const FptModel& model) { return model.side.has_fusion(); }

FeatureProvider provider_for(const RunFlags& f, const FptModel& model, const Normalizer& norm,
                             const std::string& split) {
  if (!needs_features(model)) return {};
  if (!model.config.train.use_cache) return live_features(*model.backbone, model.config, norm);
  const auto dir = cache_dir_for(f, model);
  const auto hash = cache_config_hash(model.config, model.backbone->identity());
  try {
    return cached_features(std::make_shared<const FeatureCache>(FeatureCache::open(dir, split, hash)));
  } catch (const StaleCacheError& e) {
    throw StaleCacheError(std::string(e.what()) + " (run `fpt cache` with the same config and mode, or pass --no-cache)");
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  return json::parse(in);
}

std::string fixed(double v, int digits = 2) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

std::vector<std::string> run_args(const RunFlags& f) {
  std::vector<std::string> a;
  auto add = [&](const char* flag, const std::string& v) {
    a.emplace_back(flag);
    a.push_back(v);
  };
  if (!f.config_path.empty()) add("--config", f.config_path);
  if (!f.data_root.empty()) add("--data", f.data_root);
  add("--cache-dir", cache_root(f).string());
  if (f.epochs) add("--epochs", std::to_string(*f.epochs));
  if (f.batch_size) add("--batch-size", std::to_string(*f.batch_size));
  if (f.lr) add("--lr", fixed(*f.lr, 10));
  if (f.ratio) add("--ratio", fixed(*f.ratio, 10));
  if (f.weights) add("--weights", *f.weights);
  if (f.pretrain_grid) add("--pretrain-grid", std::to_string(*f.pretrain_grid));
  if (f.no_cache) a.emplace_back("--no-cache");
  return a;
}

int run_child(const std::string& exe, const std::vector<std::string>& args) {
  std::string line = quote(exe);
  for (const auto& a : args) line += " " + quote(a);
  std::cout << "+ " << line << std::endl;
  const int status = std::system(line.c_str());
  if (status == -1) return kFailure;
  return WIFEXITED(status) ? WEXITSTATUS(status) : kFailure;
}

// One printed row of the efficiency table.
struct Row {
  std::string method;
  double params_percent = 0.0;
  std::string mem;
  std::vector<std::string> scores;
  std::optional<double> avg;
  double r = 0.0;
  double m_mem = 0.0;
};

void print_table(const std::vector<std::string>& datasets, const std::vector<Row>& rows,
                 json& out) {
  std::vector<std::string> header{"Method", "Params.", "Mem."};
  header.insert(header.end(), datasets.begin(), datasets.end());
  header.insert(header.end(), {"Avg.", "PPE", "PME"});
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& row : rows) {
    std::vector<std::string> c{row.method, fixed(row.params_percent), row.mem};
    for (std::size_t i = 0; i < datasets.size(); ++i) {
      c.push_back(i < row.scores.size() ? row.scores[i] : "-");
    }
    json j = {{"method", row.method},
              {"params_percent", row.params_percent},
              {"mem", row.mem},
              {"r", row.r},
              {"m_mem", row.m_mem}};
    if (row.avg) {
      const auto eff = EfficiencyReport::make(*row.avg, row.r, row.m_mem);
      c.insert(c.end(), {fixed(*row.avg), fixed(eff.ppe), fixed(eff.pme)});
      j["avg"] = *row.avg;
      j["ppe"] = eff.ppe;
      j["pme"] = eff.pme;
    } else {
      c.insert(c.end(), {"-", "-", "-"});
    }
    out["rows"].push_back(j);
    cells.push_back(std::move(c));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& c : cells) {
    for (std::size_t i = 0; i < c.size(); ++i) width[i] = std::max(width[i], c[i].size());
  }
  for (const auto& c : cells) {
    std::string line;
    for (std::size_t i = 0; i < c.size(); ++i) {
      std::string cell = c[i];
      if (i == 0) cell += std::string(width[i] - cell.size(), ' ');
      else cell = std::string(width[i] - cell.size(), ' ') + cell;
      line += (i ? "  " : "") + cell;
    }
    std::cout << line << "\n";
  }
}

const char* kFootnote =
    "Params. is learnable / (frozen + learnable) in percent, side network included. "
    "Mem. for runs and analytic rows is the retained-activation estimate (model v1); "
    "PME uses its ratio to full fine-tuning at the same resolution.";

}  // namespace

int cmd_synth(const SynthFlags& flags) {
  const auto cfg = base_config(flags.config_path);
  const auto data = synth_generate(cfg.data.synth);
  write_dataset(data, flags.out_root);
  std::cout << "wrote " << data.train.samples.size() << "/" << data.val.samples.size() << "/"
            << data.test.samples.size() << " train/val/test images to " << flags.out_root << "\n";
  return kOk;
}

int cmd_pretrain(const PretrainFlags& flags) {
  auto cfg = base_config(flags.config_path);
  PretrainOptions opts;
  if (flags.samples) opts.samples = *flags.samples;
  if (flags.epochs) opts.epochs = *flags.epochs;
  if (flags.source_size) opts.source_size = *flags.source_size;
  const auto bc = pretrained_backbone_config(cfg.backbone, opts);
  PretrainReport report;
  const auto weights = pretrain_backbone(cfg, opts, &report);
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) {
    std::cout << "epoch " << e << "  loss " << fixed(report.epoch_loss[e], 4) << "  accuracy "
              << fixed(report.epoch_accuracy[e], 3) << "\n";
  }
  save_backbone_weights(flags.out, bc, weights);
  std::cout << "weights: " << flags.out << " (pretrain_grid " << bc.pretrain_grid << ")\n";
  if (!flags.write_config.empty()) {
    cfg.backbone = bc;
    cfg.backbone.weights_path = fs::absolute(flags.out).string();
    save_config(cfg, flags.write_config);
    std::cout << "config: " << flags.write_config << "\n";
  }
  return kOk;
}

int cmd_cache(const CacheFlags& flags) {
  auto cfg = run_config(flags.run);
  const auto data = load_data(flags.run, cfg);
  const auto norm = pin_norm(cfg, data);
  auto model = FptModel::create(cfg, cfg.train.mode, cfg.train.seed);
  if (!model.backbone) {
    throw ConfigError("mode side_only uses no frozen features; nothing to cache");
  }
  const auto dir = cache_dir_for(flags.run, model);
  CacheBuildOptions opts;
  opts.force = flags.force;
  opts.threads = flags.threads;
  std::cout << "config digest " << hex64(config_digest(model.config)) << "\n";
  for (const auto& name : flags.splits) {
    const auto result = build_cache(data.split(name), model.config, *model.backbone, norm, dir, opts);
    std::cout << name << ": " << result.manifest.ids.size() << " samples, " << result.file_bytes
              << " bytes, " << result.manifest.skipped.size() << " skipped -> "
              << cache_data_path(dir, name).string() << "\n";
  }
  return kOk;
}

int cmd_train(const TrainFlags& flags) {
  auto cfg = run_config(flags.run);
  const auto data = load_data(flags.run, cfg);
  const auto norm = pin_norm(cfg, data);
  auto model = FptModel::create(cfg, cfg.train.mode, cfg.train.seed);
  const auto train_features = provider_for(flags.run, model, norm, "train");
  const auto val_features = provider_for(flags.run, model, norm, "val");

  TrainOptions opts;
  opts.max_steps = flags.max_steps;
  opts.validate = !data.val.samples.empty();
  const auto report = train(model, data.train, train_features, data.val, val_features, norm, opts);
  for (const auto& e : report.epochs) {
    std::cout << "epoch " << e.epoch << "  loss " << fixed(e.mean_loss, 4);
    if (e.val_auc) std::cout << "  val AUC " << fixed(*e.val_auc, 4);
    std::cout << "\n";
  }

  json out = {{"config_digest", hex64(report.config_digest)},
              {"config", to_json(model.config)},
              {"train", report.to_json()}};
  if (!data.test.samples.empty()) {
    const auto test = evaluate(model, data.test, provider_for(flags.run, model, norm, "test"), norm);
    out["test_auc"] = test.auc;
    std::cout << "test AUC " << fixed(test.auc, 4) << "\n";
  }
  fs::create_directories(flags.out_dir);
  const auto identity = model.backbone ? model.backbone->identity() : 0;
  save_checkpoint(fs::path(flags.out_dir) / "checkpoint.fptk", to_json(model.config), identity,
                  model.side);
  write_json(fs::path(flags.out_dir) / "report.json", out);
  std::cout << "config digest " << hex64(report.config_digest) << "\n"
            << "wrote " << (fs::path(flags.out_dir) / "checkpoint.fptk").string() << " and report.json\n";
  return kOk;
}

int cmd_eval(const EvalFlags& flags) {
  std::optional<TensorArchive> ckpt;
  FptConfig cfg;
  if (flags.checkpoint.empty()) {
    cfg = run_config(flags.run);
  } else {
    ckpt = read_tensor_archive(flags.checkpoint, "FPTK");
    cfg = apply_overrides(config_from_json(ckpt->header.at("config")), [&] {
      RunFlags only_io;
      only_io.no_cache = flags.run.no_cache;
      return only_io;
    }());
  }
  const auto data = load_data(flags.run, cfg);
  const auto norm = pin_norm(cfg, data);
  auto model = FptModel::create(cfg, cfg.train.mode, cfg.train.seed);
  if (ckpt) {
    const auto header = load_checkpoint(flags.checkpoint, model.side);
    const auto identity = model.backbone ? model.backbone->identity() : 0;
    if (header.at("backbone_identity").get<std::string>() != hex64(identity)) {
      throw ConfigError("checkpoint was trained against a different backbone");
    }
  }
  const auto& split = data.split(flags.split);
  const auto result = evaluate(model, split, provider_for(flags.run, model, norm, flags.split), norm);
  const auto digest = hex64(config_digest(model.config));
  if (flags.json) {
    std::cout << json{{"split", flags.split},
                      {"auc", result.auc},
                      {"samples", result.labels.size()},
                      {"config_digest", digest}}
                     .dump(2)
              << "\n";
  } else {
    std::cout << flags.split << " AUC " << fixed(result.auc, 6) << "  (" << result.labels.size()
              << " samples, config digest " << digest << ")\n";
  }
  return kOk;
}

int cmd_report(const ReportFlags& flags) {
  json out = {{"footnote", kFootnote}, {"rows", json::array()}};
  bool printed = false;
  if (!flags.fixtures.empty()) {
    const auto fx = read_json(flags.fixtures);
    const double full_mem = fx.at("full_finetune_mem").get<double>();
    std::vector<Row> rows;
    for (const auto& r : fx.at("rows")) {
      Row row;
      row.method = r.at("method").get<std::string>();
      row.params_percent = r.at("params_percent").get<double>();
      const double mem = r.at("mem").get<double>();
      row.mem = fixed(mem, 0);
      for (const auto& s : r.at("scores")) row.scores.push_back(fixed(s.get<double>()));
      row.avg = r.at("avg").get<double>();
      row.r = row.params_percent / 100.0;
      row.m_mem = mem / full_mem;
      rows.push_back(std::move(row));
    }
    std::vector<std::string> datasets = fx.at("datasets").get<std::vector<std::string>>();
    json part = {{"rows", json::array()}};
    print_table(datasets, rows, part);
    out["fixtures"] = part["rows"];
    printed = true;
  }
  if (!flags.runs.empty()) {
    // Mean test AUC per mode over the given runs.
    struct Acc {
      double auc_sum = 0.0;
      int n = 0;
      double learnable = 0, total = 0, mem = 0, full_mem = 0;
    };
    std::map<std::string, Acc> by_mode;
    std::vector<std::string> order;
    for (const auto& path : flags.runs) {
      const auto j = read_json(path);
      const auto& t = j.at("train");
      const auto mode = t.at("mode").get<std::string>();
      if (!by_mode.contains(mode)) order.push_back(mode);
      auto& a = by_mode[mode];
      if (!j.contains("test_auc")) throw ConfigError(path + " holds no test AUC");
      a.auc_sum += j.at("test_auc").get<double>();
      a.n += 1;
      a.learnable = t.at("learnable_params").get<double>();
      a.total = t.at("total_params").get<double>();
      a.mem = t.at("memory").at("retained").get<double>();
      a.full_mem = t.at("memory").at("full_finetune_retained").get<double>();
    }
    std::vector<Row> rows;
    for (const auto& mode : order) {
      const auto& a = by_mode[mode];
      Row row;
      row.method = mode + " (n=" + std::to_string(a.n) + ")";
      row.r = a.learnable / a.total;
      row.params_percent = 100.0 * row.r;
      row.mem = fixed(a.mem, 0);
      row.m_mem = a.mem / a.full_mem;
      row.avg = 100.0 * a.auc_sum / a.n;
      row.scores = {fixed(*row.avg)};
      rows.push_back(std::move(row));
    }
    if (printed) std::cout << "\n";
    json part = {{"rows", json::array()}};
    print_table({"Synthetic"}, rows, part);
    out["runs"] = part["rows"];
    printed = true;
  }
  if (flags.analytic || !printed) {
    const auto cfg = base_config(flags.config_path);
    const auto full = estimate_full_finetune_memory(cfg).retained;
    std::vector<Row> rows;
    for (auto mode : {TrainMode::fpt, TrainMode::fpt_no_selection, TrainMode::fpt_symmetric,
                      TrainMode::side_only}) {
      const auto eff = effective_config(cfg, mode);
      const auto inv = parameter_inventory(eff, mode);
      const auto mem = estimate_activation_memory(eff, mode, cfg.train.use_cache).retained;
      Row row;
      row.method = std::string(to_string(mode));
      row.r = inv.ratio();
      row.params_percent = 100.0 * row.r;
      row.mem = std::to_string(mem);
      row.m_mem = static_cast<double>(mem) / static_cast<double>(full);
      rows.push_back(std::move(row));
    }
    Row ft;
    ft.method = "full fine-tuning";
    ft.r = 1.0;
    ft.params_percent = 100.0;
    ft.mem = std::to_string(full);
    ft.m_mem = 1.0;
    rows.push_back(std::move(ft));
    if (printed) std::cout << "\n";
    json part = {{"rows", json::array()}};
    print_table({}, rows, part);
    out["analytic"] = part["rows"];
    out["config_digest"] = hex64(config_digest(cfg));
  }
  std::cout << "\n" << kFootnote << "\n";
  if (!flags.json_out.empty()) write_json(flags.json_out, out);
  return kOk;
}

int cmd_sweep(const SweepFlags& flags) {
  const auto cfg = run_config(flags.run);  // fail fast on a bad config
  (void)cfg;
  fs::create_directories(flags.out_dir);
  std::vector<std::string> reports;
  for (const auto& mode_name : flags.modes) {
    const auto mode = parse_train_mode(mode_name);
    auto base = run_args(flags.run);
    base.insert(base.end(), {"--mode", mode_name});
    if (mode != TrainMode::side_only && !flags.run.no_cache) {
      auto args = base;
      args.insert(args.begin(), "cache");
      const int rc = run_child(flags.self_exe, args);
      if (rc != kOk && rc != kCacheError) return rc;
    }
    for (auto seed : flags.seeds) {
      const auto dir = fs::path(flags.out_dir) / (mode_name + "-seed" + std::to_string(seed));
      auto args = base;
      args.insert(args.begin(), "train");
      args.insert(args.end(), {"--seed", std::to_string(seed), "--out", dir.string()});
      if (const int rc = run_child(flags.self_exe, args); rc != kOk) return rc;
      reports.push_back((dir / "report.json").string());
    }
  }
  ReportFlags rf;
  rf.runs = reports;
  rf.json_out = (fs::path(flags.out_dir) / "summary.json").string();
  return cmd_report(rf);
}

int cmd_config(const ConfigFlags& flags) {
  const auto cfg = flags.preset == "vit-base" ? FptConfig::vit_base()
                   : flags.preset == "tiny"   ? tiny_config()
                                              : FptConfig::desk();
  if (flags.out.empty()) {
    std::cout << to_json(cfg).dump(2) << "\n";
  } else {
    save_config(cfg, flags.out);
  }
  return kOk;
}

int cmd_selftest() {
  int failed = 0;
  for (const auto& r : run_selftest()) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name;
    if (!r.passed) {
      std::cout << ": " << r.detail;
      ++failed;
    }
    std::cout << "\n";
  }
  return failed ? kFailure : kOk;
}

}  // namespace fpt::cli

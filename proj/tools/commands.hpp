// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace fpt::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kIoError = 3,
  kCacheError = 4,
  kNanLoss = 5,
};

/// Flags shared by every run-shaped command. Unset optionals leave the
/// config file's value alone.
struct RunFlags {
  std::string config_path;  // empty: built-in desk defaults
  std::string data_root;    // empty: synthetic set from the config
  std::string cache_dir;    // empty: $FPT_CACHE_DIR, then ./fpt-cache
  std::optional<std::string> mode;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<double> ratio;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> weights;
  std::optional<int> pretrain_grid;
  bool no_cache = false;
};

struct CacheFlags {
  RunFlags run;
  std::vector<std::string> splits{"train", "val", "test"};
  bool force = false;
  std::size_t threads = 0;
};

struct TrainFlags {
  RunFlags run;
  std::string out_dir;
  std::size_t max_steps = 0;
};

struct EvalFlags {
  RunFlags run;
  std::string checkpoint;  // empty: the untrained model at --seed
  std::string split = "test";
  bool json = false;
};

struct ReportFlags {
  std::string config_path;
  std::string fixtures;
  std::vector<std::string> runs;
  bool analytic = false;
  std::string json_out;
};

struct SweepFlags {
  RunFlags run;
  std::vector<std::string> modes{"fpt", "side_only"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out_dir;
  std::string self_exe;
};

struct SynthFlags {
  std::string config_path;
  std::string out_root;
};

struct ConfigFlags {
  std::string preset = "desk";
  std::string out;  // empty: stdout
};

struct PretrainFlags {
  std::string config_path;
  std::string out;
  std::string write_config;
  std::optional<int> samples;
  std::optional<int> epochs;
  std::optional<int> source_size;
};

int cmd_cache(const CacheFlags& flags);
int cmd_train(const TrainFlags& flags);
int cmd_eval(const EvalFlags& flags);
int cmd_report(const ReportFlags& flags);
int cmd_sweep(const SweepFlags& flags);
int cmd_selftest();
int cmd_synth(const SynthFlags& flags);
int cmd_pretrain(const PretrainFlags& flags);
int cmd_config(const ConfigFlags& flags);

/// Runs `body`, printing any library error and mapping it to an exit code.
int guarded(const std::function<int()>& body);

}  // namespace fpt::cli

// SPDX-License-Identifier: Apache-2.0
#include "fpt/selftest.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "fpt/gradcheck.hpp"
#include "fpt/metrics.hpp"
#include "fpt/trainer.hpp"

namespace fpt {

FptConfig tiny_config() {
  FptConfig cfg;
  cfg.backbone.image_size_high = 32;
  cfg.backbone.patch_size = 8;
  cfg.backbone.dim = 16;
  cfg.backbone.layers = 2;
  cfg.backbone.heads = 2;
  cfg.backbone.pretrain_grid = 4;
  cfg.side.image_size_low = 16;
  cfg.side.reduction_factor = 4;
  cfg.side.num_prompts = 4;
  cfg.side.num_classes = 2;
  cfg.data.synth.canvas = 32;
  cfg.data.synth.cue_size = 4;
  cfg.data.synth.num_classes = 2;
  cfg.data.synth.train_count = 8;
  cfg.data.synth.val_count = 4;
  cfg.data.synth.test_count = 4;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 4;
  cfg.validate();
  return cfg;
}

namespace {

using Check = std::function<std::string()>;  // empty string = pass

std::string near(double got, double want, double tol) {
  if (std::abs(got - want) <= tol) return {};
  std::ostringstream os;
  os << "got " << got << ", expected " << want << " +- " << tol;
  return os.str();
}

std::string check_metrics() {
  if (auto e = near(ppe(93.96, 1.0), 69.54, 0.01); !e.empty()) return "ppe full: " + e;
  if (auto e = near(ppe(92.26, 0.0181), 91.54, 0.01); !e.empty()) return "ppe fpt: " + e;
  if (auto e = near(pme(92.26, 3182.0 / 24116.0), 87.42, 0.01); !e.empty()) return "pme fpt: " + e;
  const std::vector<double> scores{0.1, 0.4, 0.35, 0.8};
  const bool pos[] = {false, false, true, true};
  return near(binary_auc(scores, pos), 0.75, 1e-12);
}

std::string check_selection() {
  std::vector<double> scores(1025, 1.0 / 1025.0);
  const auto sel = select_topk(scores, 0.2, true);
  if (sel.indices.size() != 206) return "expected 206 kept tokens, got " + std::to_string(sel.indices.size());
  const auto small = select_topk(std::vector<double>{0.4, 0.1, 0.3, 0.2}, 0.5, false);
  if (small.indices != std::vector<std::uint32_t>{0, 2}) return "top-2 of [0.4,0.1,0.3,0.2] is not {0,2}";
  return {};
}

std::string check_attention_grad() {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    auto k = normal_tensor<double>(Shape{1, 2, 5, 3}, 1.0, rng, false);
    auto v = normal_tensor<double>(Shape{1, 2, 5, 3}, 1.0, rng, false);
    auto w = normal_tensor<double>(Shape{1, 2, 4, 3}, 1.0, rng, false);
    auto q = normal_tensor<double>(Shape{1, 2, 4, 3}, 1.0, rng, true);
    const double err = finite_diff_check(
        [&] { return ops::sum(ops::mul(ops::scaled_dot_attention(q, k, v).output, w)); },
        q);
    if (err >= 1e-5) return "relative error " + std::to_string(err) + " at seed " + std::to_string(seed);
  }
  return {};
}

std::string check_side_structure() {
  const auto cfg = tiny_config();
  auto model = FptModel::create(cfg, TrainMode::fpt, 1);
  Rng rng(3);
  auto images_low = normal_tensor<float>(Shape{2, 3, 16, 16}, 1.0, rng, false);
  auto images_high = normal_tensor<float>(Shape{2, 3, 32, 32}, 1.0, rng, false);
  const auto feats = frozen_features(*model.backbone, images_high, model.config.selection);
  std::vector<SideLayerTrace> trace;
  const auto logits = side_forward<float>(images_low, feats, model.side, nullptr, &trace);
  const std::size_t n_s = model.side.dims.tokens();
  for (const auto& t : trace) {
    if (t.input_tokens != n_s || t.output_tokens != n_s) return "side sequence length drifted";
    if (t.fused_tokens != n_s + model.side.dims.num_prompts) return "fused length is not N_S + P";
    if (t.cross_map_shape != Shape{2, 2, model.side.dims.num_prompts, feats[0].count}) {
      return "cross-attention map shape " + shape_str(t.cross_map_shape);
    }
  }
  if (logits.shape() != Shape{2, 2}) return "logits shape " + shape_str(logits.shape());
  return {};
}

std::string check_freeze() {
  auto cfg = tiny_config();
  auto data = synth_generate(cfg.data.synth);
  const auto norm = channel_stats(data.train);
  auto model = FptModel::create(cfg, TrainMode::fpt, 0);
  const auto snap = snapshot_backbone(model);
  TrainOptions opts;
  opts.max_steps = 2;
  opts.validate = false;
  const auto provider = live_features(*model.backbone, model.config, norm);
  train(model, data.train, provider, data.val, provider, norm, opts);
  const auto report = freeze_check(model, snap);
  return report.passed ? std::string() : report.failures.front();
}

}  // namespace

std::vector<SelftestResult> run_selftest() {
  const std::vector<std::pair<std::string, Check>> checks = {
      {"metric arithmetic", check_metrics},
      {"token selection", check_selection},
      {"attention gradient", check_attention_grad},
      {"side network structure", check_side_structure},
      {"freeze contract", check_freeze},
  };
  std::vector<SelftestResult> results;
  for (const auto& [name, fn] : checks) {
    SelftestResult r{name, false, {}};
    try {
      r.detail = fn();
      r.passed = r.detail.empty();
    } catch (const std::exception& e) {
      r.detail = std::string("threw: ") + e.what();
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace fpt

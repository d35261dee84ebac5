// SPDX-License-Identifier: Apache-2.0
// Runs every acceptance criterion and prints one PASS/FAIL line for each.
// Exit status is the number of failed criteria (0 when all pass).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpt/gradcheck.hpp"
#include "fpt/metrics.hpp"
#include "fpt/pretrain.hpp"
#include "fpt/selftest.hpp"
#include "fpt/trainer.hpp"
#include "oracles.hpp"

using namespace fpt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

fs::path scratch_dir() {
  const auto dir = fs::temp_directory_path() / "fpt_acceptance";
  fs::create_directories(dir);
  return dir;
}

// 1 ------------------------------------------------------------------------

Outcome metric_arithmetic() {
  std::ifstream in(FPT_FIXTURES_PATH);
  if (!in) return {false, std::string("cannot read ") + FPT_FIXTURES_PATH};
  const auto fx = nlohmann::json::parse(in);
  const double full_mem = fx.at("full_finetune_mem").get<double>();
  double worst = 0;
  std::string worst_row;
  std::size_t rows = 0;
  for (const auto& row : fx.at("rows")) {
    ++rows;
    const double avg = row.at("avg").get<double>();
    const double r = row.at("params_percent").get<double>() / 100.0;
    const double m = row.at("mem").get<double>() / full_mem;
    for (double err : {std::abs(ppe(avg, r) - row.at("ppe").get<double>()),
                       std::abs(pme(avg, m) - row.at("pme").get<double>())}) {
      if (err > worst) worst = err, worst_row = row.at("method").get<std::string>();
    }
  }
  const auto fpt_row = EfficiencyReport::make(92.26, 0.0181, 3182.0 / 24116.0);
  return {rows == 8 && worst <= 0.02, fmt("%zu rows, max |err| %.4f (%s); FPT %.2f/%.2f", rows, worst, worst_row.c_str(),
                             fpt_row.ppe, fpt_row.pme)};
}

// 2 ------------------------------------------------------------------------

Outcome freeze_contract() {
  auto cfg = FptConfig::desk();
  auto data = synth_generate(cfg.data.synth);
  const auto norm = channel_stats(data.train);
  pin_normalizer(cfg, norm);
  auto model = FptModel::create(cfg, TrainMode::fpt, 0);
  const auto snap = snapshot_backbone(model);
  TrainOptions opts;
  opts.max_steps = 5;
  opts.validate = false;
  const auto rep = train(model, data.train, live_features(*model.backbone, model.config, norm), data.val, {},
                         norm, opts);
  const auto check = freeze_check(model, snap);

  std::set<std::string> prefixes;
  for (const auto& t : model.learnable()) prefixes.insert(t.name.substr(0, t.name.find('.')));
  bool fusion_only_maps = true;
  for (const auto& t : model.learnable()) {
    if (t.name.rfind("fusion.", 0) == 0 && t.name.find(".f_in.") == std::string::npos &&
        t.name.find(".f_out.") == std::string::npos) {
      fusion_only_maps = false;
    }
  }
  std::size_t backbone_learnable = 0;
  for (const auto& t : model.named_tensors()) {
    if (t.name.rfind("backbone", 0) == 0 && t.tensor.requires_grad()) ++backbone_learnable;
  }
  const bool set_ok = prefixes == std::set<std::string>{"side", "prompts", "fusion", "head"} && fusion_only_maps;
  return {check.passed && set_ok && backbone_learnable == 0 && rep.step_losses.size() == 5,
          fmt("%zu steps, %zu backbone tensors unchanged, learnable set %s%s", rep.step_losses.size(),
              snap.tensors.size(), set_ok ? "{side, prompts, fusion f_in/f_out, head}" : "WRONG",
              check.passed ? "" : (" first failure: " + check.failures.front()).c_str())};
}

// 3 ------------------------------------------------------------------------

Outcome gradient_checks() {
  constexpr int kSeeds = 20;
  double worst = 0;
  std::string worst_site;
  auto track = [&](const char* site, double err) {
    if (!(err <= worst)) worst = err, worst_site = site;
  };
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(static_cast<std::uint64_t>(9000 + seed));
    auto randn = [&](Shape s, bool leaf) { return normal_tensor<double>(std::move(s), 1.0, rng, leaf); };
    {
      auto x = randn(Shape{3, 6}, true);
      auto r = randn(Shape{3, 6}, false);
      track("softmax", finite_diff_check([&] { return ops::sum(ops::mul(ops::softmax(x, 1), r)); }, x));
    }
    {
      auto q = randn(Shape{2, 2, 3, 4}, true), k = randn(Shape{2, 2, 5, 4}, true), v = randn(Shape{2, 2, 5, 4}, true);
      auto r = randn(Shape{2, 2, 3, 4}, false);
      auto f = [&] { return ops::sum(ops::mul(ops::scaled_dot_attention(q, k, v).output, r)); };
      for (auto* t : {&q, &k, &v}) track("attention", finite_diff_check(f, *t));
    }
    {
      auto x = randn(Shape{3, 6}, true), g = randn(Shape{6}, true), b = randn(Shape{6}, true);
      auto r = randn(Shape{3, 6}, false);
      auto f = [&] { return ops::sum(ops::mul(ops::layer_norm(x, g, b, 1e-6), r)); };
      for (auto* t : {&x, &g, &b}) track("layer_norm", finite_diff_check(f, *t));
    }
    // FFM and one full side layer share the same shapes: B 2, N_S 5, d_S 4,
    // P 3, h_M 2, d_head 3, S_sel 4.
    LayerFusionFeatures<double> feats;
    feats.layer = 0;
    feats.batch = 2;
    feats.heads = 2;
    feats.count = 4;
    feats.head_dim = 3;
    feats.indices.assign(8, 0);
    feats.keys = randn(Shape{2, 2, 4, 3}, false);
    feats.values = randn(Shape{2, 2, 4, 3}, false);
    auto z = randn(Shape{2, 5, 4}, true);
    auto prompts = randn(Shape{3, 4}, true);
    FusionWeights<double> fw{Linear<double>::xavier(4, 6, rng, true), Linear<double>::xavier(6, 4, rng, true)};
    {
      auto r = randn(Shape{2, 8, 4}, false);
      auto f = [&] { return ops::sum(ops::mul(ffm_forward(z, feats, prompts, fw, 0).sequence, r)); };
      for (auto* t : {&z, &prompts, &fw.f_in.weight, &fw.f_in.bias, &fw.f_out.weight}) {
        track("ffm", finite_diff_check(f, *t));
      }
    }
    {
      auto block = BlockWeights<double>::create(4, 2, 2, rng, true);
      auto r = randn(Shape{2, 5, 4}, false);
      auto f = [&] {
        return ops::sum(ops::mul(side_layer_forward<double>(0, z, &feats, &prompts, &fw, block), r));
      };
      for (auto* t : {&z, &prompts, &fw.f_in.weight, &fw.f_out.weight, &block.q.weight, &block.fc1.weight,
                      &block.norm1.gain}) {
        track("side_layer", finite_diff_check(f, *t));
      }
    }
  }
  return {worst < 1e-5, fmt("%d seeds x {softmax, attention, layer_norm, ffm, side_layer}; max rel err %.2e (%s)",
                            kSeeds, worst, worst_site.c_str())};
}

// 4 ------------------------------------------------------------------------

Outcome cache_equivalence() {
  auto cfg = FptConfig::desk();
  const auto data = synth_generate(cfg.data.synth);
  const auto norm = channel_stats(data.train);
  pin_normalizer(cfg, norm);
  auto live_model = FptModel::create(cfg, TrainMode::fpt, 0);
  auto cached_model = FptModel::create(cfg, TrainMode::fpt, 0);
  const auto dir = scratch_dir() / "cache_equivalence";
  fs::remove_all(dir);
  CacheBuildOptions build;
  build.force = true;
  build_cache(data.train, cached_model.config, *cached_model.backbone, norm, dir, build);
  const auto hash = cache_config_hash(cached_model.config, cached_model.backbone->identity());
  auto cache = std::make_shared<const FeatureCache>(FeatureCache::open(dir, "train", hash));

  TrainOptions opts;
  opts.max_steps = 3;
  opts.validate = false;
  const auto a = train(live_model, data.train, live_features(*live_model.backbone, live_model.config, norm),
                       data.val, {}, norm, opts);
  const auto b = train(cached_model, data.train, cached_features(cache), data.val, {}, norm, opts);
  fs::remove_all(dir);
  std::ostringstream os;
  os.precision(9);
  for (std::size_t i = 0; i < a.step_losses.size(); ++i) os << (i ? ", " : "") << a.step_losses[i];
  return {a.step_losses.size() == 3 && a.step_losses == b.step_losses,
          "3 steps bitwise " + std::string(a.step_losses == b.step_losses ? "equal" : "DIFFERENT") + " [" +
              os.str() + "]"};
}

// 5 ------------------------------------------------------------------------

Outcome selection_oracle() {
  Rng rng(5);
  std::size_t cases = 0, mismatches = 0;
  for (std::size_t n = 2; n <= 64; ++n) {
    for (int regime = 0; regime < 3; ++regime) {
      std::vector<double> s(n);
      for (auto& v : s) {
        v = regime == 0 ? rng.uniform() : regime == 1 ? std::floor(rng.uniform(0.0, 3.0)) : 1.0;
      }
      for (int tenths = 1; tenths <= 10; ++tenths) {
        for (bool keep_cls : {true, false}) {
          const auto got = select_topk(s, tenths / 10.0, keep_cls);
          ++cases;
          if (got.indices != oracle::topk_by_sort(s, tenths, keep_cls)) ++mismatches;
        }
      }
    }
  }
  const std::vector<double> uniform(1025, 1.0 / 1025.0);
  const auto sel = select_topk(uniform, 0.2, true);
  const bool cls_kept = !sel.indices.empty() && sel.indices.front() == 0;
  return {mismatches == 0 && sel.indices.size() == 206 && cls_kept,
          fmt("%zu cases, %zu mismatches; N_patch 1024 at m 0.2 keeps %zu with CLS", cases, mismatches,
              sel.indices.size())};
}

// 6 ------------------------------------------------------------------------

LayerFusionFeatures<double> random_features(std::size_t layer, std::size_t batch, std::size_t heads,
                                            std::size_t count, std::size_t dh, Rng& rng) {
  LayerFusionFeatures<double> f;
  f.layer = layer;
  f.batch = batch;
  f.heads = heads;
  f.count = count;
  f.head_dim = dh;
  f.indices.assign(batch * count, 0);
  f.keys = normal_tensor<double>(Shape{batch, heads, count, dh}, 1.0, rng, false);
  f.values = normal_tensor<double>(Shape{batch, heads, count, dh}, 1.0, rng, false);
  return f;
}

Outcome structural_laws() {
  std::vector<std::string> broken;
  SideDims dims;
  dims.image_size = 16;
  dims.patch = 8;
  dims.dim = 4;
  dims.heads = 2;
  dims.layers = 3;
  dims.mlp_ratio = 2;
  dims.num_classes = 3;
  dims.backbone_dim = 6;
  dims.backbone_heads = 2;
  std::size_t checked = 0;
  for (std::size_t P : {0u, 1u, 4u, 16u}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      dims.num_prompts = P;
      const auto net = SideNetwork<double>::create(dims, seed);
      Rng rng(seed + 100);
      const std::size_t S = 2 + seed;
      const auto images = normal_tensor<double>(Shape{2, 3, 16, 16}, 1.0, rng, false);
      std::vector<LayerFusionFeatures<double>> feats;
      for (std::size_t l = 0; l < dims.layers; ++l) feats.push_back(random_features(l, 2, 2, S, 3, rng));
      std::vector<SideLayerTrace> trace;
      const auto logits = side_forward<double>(images, feats, net, nullptr, &trace);
      ++checked;
      if (trace.size() != dims.layers) broken.push_back("trace length");
      for (const auto& t : trace) {
        if (t.input_tokens != 5 || t.output_tokens != 5) broken.push_back(fmt("length P=%zu", P));
        if (t.fused_tokens != 5 + P) broken.push_back(fmt("fused length P=%zu", P));
        if (P > 0 && t.cross_map_shape != Shape{2, 2, P, S}) broken.push_back(fmt("map shape P=%zu", P));
      }
      if (P == 0) {
        const auto z0 = embed_patches(images, 8, net.patch_embed, net.cls_token, net.pos_embed);
        double err = 0;
        for (std::size_t b = 0; b < 2; ++b) {
          const oracle::Vec start(z0.values().begin() + static_cast<std::ptrdiff_t>(b * 5 * 4),
                                  z0.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * 5 * 4));
          auto z = start;
          for (const auto& blk : net.blocks) z = oracle::block(blk, z, 5);
          const auto normed = oracle::norm_of(net.final_norm, z, 5);
          const auto want = oracle::linear_of(net.head, oracle::Vec(normed.begin(), normed.begin() + 4), 1);
          const oracle::Vec got(logits.values().begin() + static_cast<std::ptrdiff_t>(b * 3),
                                logits.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * 3));
          err = std::max(err, oracle::max_abs_diff(got, want));
        }
        if (err > 1e-10) broken.push_back(fmt("P=0 differs from plain transformer by %.2e", err));
      }
    }
  }

  // The same laws at desk shape with real frozen features.
  auto cfg = FptConfig::desk();
  SynthSpec spec = cfg.data.synth;
  spec.train_count = 4;
  spec.val_count = 0;
  spec.test_count = 0;
  const auto data = synth_generate(spec);
  const auto norm = channel_stats(data.train);
  const auto model = FptModel::create(cfg, TrainMode::fpt, 0);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto feats = live_features(*model.backbone, model.config, norm)(data.train, idx);
  std::vector<Image> low;
  for (const auto& s : data.train.samples) low.push_back(resize_bilinear(s.image, 32));
  std::vector<SideLayerTrace> trace;
  side_forward<float>(to_tensor(low, norm), feats, model.side, nullptr, &trace);
  const std::size_t s_sel = selected_count(257, 0.2, true);
  for (const auto& t : trace) {
    if (t.input_tokens != 17 || t.output_tokens != 17 || t.fused_tokens != 33) broken.push_back("desk length");
    if (t.cross_map_shape != Shape{4, 4, 16, s_sel}) broken.push_back("desk map shape");
  }
  return {broken.empty(), broken.empty()
                              ? fmt("%zu networks (P in {0,1,4,16}) plus desk shape: length 17 per layer, "
                                    "map (4, 4, 16, %zu), P=0 equals plain transformer",
                                    checked, s_sel)
                              : broken.front()};
}

// 7 ------------------------------------------------------------------------

Outcome memory_direction() {
  auto cfg = FptConfig::vit_base();
  cfg.selection.ratio = 1.0;
  const auto asym = estimate_activation_memory(cfg, TrainMode::fpt);
  const auto sym = estimate_activation_memory(cfg, TrainMode::fpt_symmetric);
  cfg.selection.ratio = 0.2;
  const auto sel = estimate_activation_memory(cfg, TrainMode::fpt);
  const double a_ratio = static_cast<double>(asym.retained) / static_cast<double>(sym.retained);
  const double f_ratio = static_cast<double>(sel.fusion) / static_cast<double>(asym.fusion);
  return {a_ratio <= 0.5 && f_ratio <= 0.25,
          fmt("asymmetric/symmetric retained %.3f (%llu vs %llu); fusion m 0.2 / m 1.0 %.3f", a_ratio,
              static_cast<unsigned long long>(asym.retained), static_cast<unsigned long long>(sym.retained),
              f_ratio)};
}

// 8 ------------------------------------------------------------------------

Outcome synthetic_benefit() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = scratch_dir() / "benefit";
  fs::remove_all(dir);
  fs::create_directories(dir);

  auto cfg = FptConfig::desk();
  const PretrainOptions po;
  PretrainReport pr;
  const auto weights = pretrain_backbone(cfg, po, &pr);
  cfg.backbone = pretrained_backbone_config(cfg.backbone, po);
  cfg.backbone.weights_path = (dir / "backbone.fptw").string();
  save_backbone_weights(cfg.backbone.weights_path, cfg.backbone, weights);

  const auto data = synth_generate(cfg.data.synth);
  const auto norm = channel_stats(data.train);
  pin_normalizer(cfg, norm);
  const auto probe = FptModel::create(cfg, TrainMode::fpt, 0);
  CacheBuildOptions build;
  build.force = true;
  for (const auto* split : {&data.train, &data.val, &data.test}) {
    build_cache(*split, probe.config, *probe.backbone, norm, dir, build);
  }
  const auto hash = cache_config_hash(probe.config, probe.backbone->identity());
  auto open = [&](const char* split) {
    return cached_features(std::make_shared<const FeatureCache>(FeatureCache::open(dir, split, hash)));
  };
  const auto train_f = open("train"), val_f = open("val"), test_f = open("test");

  double fpt_sum = 0, side_sum = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (auto mode : {TrainMode::fpt, TrainMode::side_only}) {
      auto c = cfg;
      c.train.seed = seed;
      auto model = FptModel::create(c, mode, seed);
      const bool fused = mode != TrainMode::side_only;
      train(model, data.train, fused ? train_f : FeatureProvider{}, data.val, fused ? val_f : FeatureProvider{},
            norm);
      const double auc = evaluate(model, data.test, fused ? test_f : FeatureProvider{}, norm).auc;
      (fused ? fpt_sum : side_sum) += auc;
      per_seed += fmt(" %s%.3f", fused ? "f" : "s", auc);
    }
  }
  fs::remove_all(dir);
  const double fpt_mean = fpt_sum / 3, side_mean = side_sum / 3;
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  return {fpt_mean >= side_mean + 0.05 && fpt_mean >= 0.85 && minutes <= 30.0,
          fmt("fpt %.3f vs side_only %.3f over 3 seeds (%s ), pretrain acc %.3f, %.1f min", fpt_mean, side_mean,
              per_seed.c_str(), pr.epoch_accuracy.empty() ? 0.0 : pr.epoch_accuracy.back(), minutes)};
}

// 9 ------------------------------------------------------------------------

Outcome parameter_ratio() {
  const auto cfg = FptConfig::vit_base();
  const auto inv = parameter_inventory(cfg, TrainMode::fpt);
  const double pct = 100.0 * inv.ratio();
  return {inv.ratio() < 0.05,
          fmt("ViT-B k=8 P=16: %llu learnable / %llu total = %.2f%% (reference 1.81%%, gap %+.2f points from "
              "per-layer f_in/f_out maps)",
              static_cast<unsigned long long>(inv.learnable), static_cast<unsigned long long>(inv.total()), pct,
              pct - 1.81)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"metric arithmetic", metric_arithmetic},   {"freeze contract", freeze_contract},
      {"gradient checks", gradient_checks},       {"cache equivalence", cache_equivalence},
      {"selection oracle", selection_oracle},     {"structural laws", structural_laws},
      {"memory direction", memory_direction},     {"synthetic benefit", synthetic_benefit},
      {"parameter ratio", parameter_ratio},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += out.passed ? 0 : 1;
    std::printf("%s  criterion %zu  %-18s %s  [%.1f s]\n", out.passed ? "PASS" : "FAIL", i + 1, criteria[i].first,
                out.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed;
}

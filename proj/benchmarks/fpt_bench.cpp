// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <filesystem>

#include "fpt/cache.hpp"
#include "fpt/selftest.hpp"
#include "fpt/trainer.hpp"

namespace {

using namespace fpt;

void BM_Linear(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  auto x = normal_tensor<float>(Shape{8, n, 64}, 1.0, rng, false);
  auto lin = Linear<float>::xavier(64, 256, rng, false);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(lin(x));
  state.SetItemsProcessed(state.iterations() * 8 * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Linear)->Arg(17)->Arg(257);

void BM_Attention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  auto q = normal_tensor<float>(Shape{8, 4, n, 16}, 1.0, rng, false);
  auto k = normal_tensor<float>(Shape{8, 4, n, 16}, 1.0, rng, false);
  auto v = normal_tensor<float>(Shape{8, 4, n, 16}, 1.0, rng, false);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::scaled_dot_attention(q, k, v).output);
}
BENCHMARK(BM_Attention)->Arg(17)->Arg(257);

void BM_SelectTopk(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  std::vector<double> scores(n);
  for (auto& s : scores) s = rng.uniform();
  for (auto _ : state) benchmark::DoNotOptimize(select_topk(scores, 0.2, true));
}
BENCHMARK(BM_SelectTopk)->Arg(257)->Arg(1025);

void BM_BackboneForward(benchmark::State& state) {
  const auto cfg = FptConfig::desk();
  const auto backbone = Backbone<float>::create(cfg.backbone);
  Rng rng(4);
  const auto hi = static_cast<std::size_t>(cfg.backbone.image_size_high);
  auto images = normal_tensor<float>(Shape{4, 3, hi, hi}, 1.0, rng, false);
  for (auto _ : state) {
    benchmark::DoNotOptimize(frozen_features(backbone, images, cfg.selection));
  }
  state.SetItemsProcessed(state.iterations() * 4);
}
BENCHMARK(BM_BackboneForward)->Unit(benchmark::kMillisecond);

void BM_SideStep(benchmark::State& state) {
  const auto cfg = FptConfig::desk();
  auto model = FptModel::create(cfg, TrainMode::fpt, 0);
  Rng rng(5);
  const auto hi = static_cast<std::size_t>(cfg.backbone.image_size_high);
  const auto lo = model.side_image_size();
  const auto feats = frozen_features(*model.backbone, normal_tensor<float>(Shape{16, 3, hi, hi}, 1.0, rng, false),
                                     cfg.selection);
  auto images = normal_tensor<float>(Shape{16, 3, lo, lo}, 1.0, rng, false);
  const std::vector<int> labels(16, 1);
  for (auto _ : state) {
    auto loss = ops::cross_entropy(side_forward<float>(images, feats, model.side), labels);
    loss.backward();
    for (auto& t : model.learnable()) t.tensor.clear_grad();
  }
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_SideStep)->Unit(benchmark::kMillisecond);

void BM_CacheBatch(benchmark::State& state) {
  auto cfg = tiny_config();
  cfg.data.synth.train_count = 64;
  const auto data = synth_generate(cfg.data.synth);
  const auto norm = channel_stats(data.train);
  pin_normalizer(cfg, norm);
  const auto backbone = Backbone<float>::create(cfg.backbone);
  const auto dir = std::filesystem::temp_directory_path() / "fpt_bench_cache";
  CacheBuildOptions opts;
  opts.force = true;
  build_cache(data.train, cfg, backbone, norm, dir, opts);
  const auto cache = FeatureCache::open(dir, "train", cache_config_hash(cfg, backbone.identity()));
  std::vector<std::size_t> rows(16);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = (i * 7) % cache.size();
  for (auto _ : state) benchmark::DoNotOptimize(cache.batch(rows));
  std::filesystem::remove_all(dir);
}
BENCHMARK(BM_CacheBatch);

}  // namespace

BENCHMARK_MAIN();

// SPDX-License-Identifier: Apache-2.0
#include "fpt/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fpt/data.hpp"
#include "fpt/errors.hpp"
#include "fpt/hash.hpp"
#include "fpt/optim.hpp"

namespace fpt {

BackboneConfig pretrained_backbone_config(const BackboneConfig& cfg, const PretrainOptions& opts) {
  if (opts.source_size <= 0 || opts.source_size % cfg.patch_size != 0) {
    throw ConfigError("pretrain source size " + std::to_string(opts.source_size) +
                      " is not a positive multiple of patch " + std::to_string(cfg.patch_size));
  }
  BackboneConfig out = cfg;
  out.pretrain_grid = opts.source_size / cfg.patch_size;
  out.weights_path.clear();
  return out;
}

BackboneWeights<float> pretrain_backbone(const FptConfig& cfg, const PretrainOptions& opts,
                                         PretrainReport* report) {
  if (opts.samples <= 0 || opts.epochs <= 0 || opts.batch_size <= 0) {
    throw ConfigError("pretrain samples, epochs and batch size must be positive");
  }
  const BackboneConfig bc = pretrained_backbone_config(cfg.backbone, opts);
  SynthSpec src = cfg.data.synth;
  src.canvas = opts.source_size;
  src.seed = opts.seed;
  const int classes = src.num_classes;

  Split corpus;
  corpus.name = "source";
  for (int i = 0; i < opts.samples; ++i) {
    const int label = i % classes;
    corpus.samples.push_back(
        {"", label, {}, synth_image(src, label, mix_seed(opts.seed, 9, static_cast<std::uint64_t>(i)))});
  }
  const Normalizer norm = channel_stats(corpus);

  auto weights = BackboneWeights<float>::random(bc);
  std::vector<Tensor<float>> params;
  for (const auto& t : weights.named_tensors()) {
    auto p = t.tensor;
    p.set_requires_grad(true);
    params.push_back(p);
  }
  const auto d = static_cast<std::size_t>(bc.dim);
  Rng rng(mix_seed(opts.seed, 0x4EAD));
  auto final_norm = LayerNormParams<float>::identity(d, true);
  auto head = Linear<float>::xavier(d, static_cast<std::size_t>(classes), rng, true);
  params.insert(params.end(), {final_norm.gain, final_norm.bias, head.weight, head.bias});
  auto state = OptimizerState<float>::init(params, {opts.lr, 0.9, 0.999, 1e-8, opts.weight_decay});

  const auto n = static_cast<std::size_t>(opts.samples);
  const auto batch = static_cast<std::size_t>(opts.batch_size);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng shuffle(mix_seed(opts.seed, 0x0DE5, static_cast<std::uint64_t>(epoch)));
    shuffle.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0, correct = 0, seen = 0;
    for (std::size_t lo = 0; lo < n; lo += batch) {
      const std::size_t b = std::min(batch, n - lo);
      std::vector<Image> imgs;
      std::vector<int> labels;
      for (std::size_t i = lo; i < lo + b; ++i) {
        const auto& s = corpus.samples[order[i]];
        Rng flip(mix_seed(mix_seed(opts.seed, 0xF11), static_cast<std::uint64_t>(epoch), order[i]));
        imgs.push_back(flip.bernoulli(0.5) ? flip_horizontal(s.image) : s.image);
        labels.push_back(s.label);
      }
      auto z = embed_patches(to_tensor(imgs, norm), static_cast<std::size_t>(bc.patch_size),
                             weights.patch_embed, weights.cls_token, weights.pos_embed);
      for (const auto& blk : weights.blocks) z = block_forward(blk, z).output;
      const auto logits = head(ops::reshape(ops::slice_tokens(final_norm(z), 0, 1), Shape{b, d}));
      const auto lv = logits.values();
      for (std::size_t i = 0; i < b; ++i) {
        const auto row = lv.subspan(i * static_cast<std::size_t>(classes), static_cast<std::size_t>(classes));
        const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        correct += arg == labels[i];
      }
      seen += b;
      auto loss = ops::cross_entropy(logits, labels);
      if (!std::isfinite(loss.item())) throw NanLossError("non-finite loss while pretraining the backbone");
      loss_sum += loss.item();
      ++batches;
      loss.backward();
      adamw_step(params, state);
      for (auto& p : params) p.clear_grad();
    }
    if (report) {
      report->epoch_loss.push_back(loss_sum / static_cast<double>(batches));
      report->epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(seen));
    }
  }
  for (auto& p : params) p.set_requires_grad(false);
  return weights;
}

}  // namespace fpt

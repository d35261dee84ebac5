// SPDX-License-Identifier: Apache-2.0
#include "fpt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fpt/errors.hpp"
#include "fpt/hash.hpp"
#include "fpt/optim.hpp"

namespace fpt {

FptConfig effective_config(const FptConfig& cfg, TrainMode mode) {
  FptConfig out = cfg;
  out.train.mode = mode;
  if (mode == TrainMode::fpt_no_selection) {
    out.selection.ratio = 1.0;
  }
  out.validate();
  return out;
}

FptModel FptModel::create(const FptConfig& cfg, TrainMode mode, std::uint64_t seed) {
  FptModel model;
  model.mode = mode;
  model.config = effective_config(cfg, mode);
  if (mode != TrainMode::side_only) {
    model.backbone.emplace(Backbone<float>::create(model.config.backbone));
  }
  model.side = SideNetwork<float>::create(SideDims::from_config(model.config, mode), seed);
  return model;
}

std::vector<NamedTensor<float>> FptModel::named_tensors() const {
  std::vector<NamedTensor<float>> out;
  if (backbone) {
    out = backbone->named_tensors();
  }
  for (auto& t : side.named_parameters()) {
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<NamedTensor<float>> FptModel::learnable() const {
  std::vector<NamedTensor<float>> out;
  for (auto& t : named_tensors()) {
    if (t.tensor.requires_grad()) {
      out.push_back(std::move(t));
    }
  }
  return out;
}

FeatureProvider live_features(const Backbone<float>& backbone, const FptConfig& cfg,
                              const Normalizer& norm) {
  const auto high = static_cast<std::size_t>(cfg.backbone.image_size_high);
  const SelectionConfig selection = cfg.selection;
  return [&backbone, high, selection, norm](const Split& split,
                                            std::span<const std::size_t> indices) {
    std::vector<Image> imgs;
    imgs.reserve(indices.size());
    for (auto i : indices) {
      imgs.push_back(resize_bilinear(load_sample_image(split.samples.at(i)), high));
    }
    return frozen_features(backbone, to_tensor(imgs, norm), selection);
  };
}

FeatureProvider cached_features(std::shared_ptr<const FeatureCache> cache) {
  return [cache = std::move(cache)](const Split& split, std::span<const std::size_t> indices) {
    std::vector<std::size_t> rows;
    rows.reserve(indices.size());
    for (auto i : indices) {
      rows.push_back(cache->index_of(split.samples.at(i).id));
    }
    return cache->batch(rows);
  };
}

nlohmann::json TrainReport::to_json() const {
  nlohmann::json epochs_json = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json rec = {{"epoch", e.epoch}, {"mean_loss", e.mean_loss}};
    rec["val_auc"] = e.val_auc ? nlohmann::json(*e.val_auc) : nlohmann::json(nullptr);
    epochs_json.push_back(std::move(rec));
  }
  return {{"mode", mode},
          {"seed", seed},
          {"config_digest", hex64(config_digest)},
          {"epochs", epochs_json},
          {"step_losses", step_losses},
          {"best_epoch", best_epoch},
          {"best_val_auc", best_val_auc ? nlohmann::json(*best_val_auc) : nlohmann::json(nullptr)},
          {"best_checkpoint", best_checkpoint},
          {"learnable_params", learnable_params},
          {"total_params", total_params},
          {"memory",
           {{"model_version", memory.version},
            {"retained", memory.retained},
            {"fusion", memory.fusion},
            {"transient", memory.transient},
            {"full_finetune_retained", full_finetune_memory}}}};
}

namespace {

std::vector<Tensor<float>> parameter_tensors(const FptModel& model) {
  std::vector<Tensor<float>> out;
  for (auto& t : model.learnable()) {
    out.push_back(std::move(t.tensor));
  }
  return out;
}

std::vector<std::vector<float>> copy_values(const std::vector<Tensor<float>>& params) {
  std::vector<std::vector<float>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    out.emplace_back(p.values().begin(), p.values().end());
  }
  return out;
}

Tensor<float> forward_batch(const FptModel& model, const Split& split,
                            std::span<const std::size_t> idx, const FeatureProvider& features,
                            const Normalizer& norm, const std::function<Image(const Image&, std::size_t)>& prepare,
                            Rng* dropout_rng) {
  std::vector<Image> low;
  low.reserve(idx.size());
  for (auto i : idx) {
    low.push_back(prepare(load_sample_image(split.samples.at(i)), i));
  }
  const auto images = to_tensor(low, norm);
  std::vector<LayerFusionFeatures<float>> fused;
  if (model.side.has_fusion()) {
    if (!features) {
      throw LookupError("mode " + std::string(to_string(model.mode)) +
                        " needs frozen features but none were provided");
    }
    fused = features(split, idx);
  }
  return side_forward<float>(images, fused, model.side, dropout_rng);
}

}  // namespace

TrainReport train(FptModel& model, const Split& train_split, const FeatureProvider& train_features,
                  const Split& val_split, const FeatureProvider& val_features,
                  const Normalizer& norm, const TrainOptions& options) {
  const auto& cfg = model.config;
  const auto& run = cfg.train;
  TrainReport report;
  report.mode = std::string(to_string(model.mode));
  report.seed = run.seed;
  report.config_digest = config_digest(cfg);
  const auto named = model.named_tensors();
  report.learnable_params = count_params<float>(named, true);
  report.total_params = count_params<float>(named, false);
  report.memory = estimate_activation_memory(cfg, model.mode, run.use_cache);
  report.full_finetune_memory = estimate_full_finetune_memory(cfg).retained;

  auto params = parameter_tensors(model);
  auto state = OptimizerState<float>::init(
      params, {run.lr, run.beta1, run.beta2, run.eps, run.weight_decay});
  auto best = copy_values(params);

  const std::size_t n = train_split.samples.size();
  const auto batch = static_cast<std::size_t>(run.batch_size);
  const std::size_t low = model.side_image_size();
  const std::uint64_t aug_seed = mix_seed(run.seed, 0xA06);
  std::size_t step = 0;
  bool stop = false;

  for (int epoch = 0; epoch < run.epochs && !stop; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(run.seed, 0x0DE5, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    const auto augment = [&](const Image& img, std::size_t index) {
      Rng rng(mix_seed(aug_seed, static_cast<std::uint64_t>(epoch), index));
      return augment_low(img, low, rng);
    };

    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t lo = 0; lo < n; lo += batch) {
      const std::span<const std::size_t> idx(order.data() + lo, std::min(batch, n - lo));
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train_split.samples[i].label);

      Rng dropout_rng(mix_seed(run.seed, 0xD80, step));
      Tensor<float> loss;
      try {
        const auto logits = forward_batch(model, train_split, idx, train_features, norm, augment,
                                          cfg.side.dropout > 0.0 ? &dropout_rng : nullptr);
        loss = ops::cross_entropy(logits, labels);
      } catch (const InvalidValueError& e) {
        throw NanLossError("non-finite activations at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ": " + e.what());
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NanLossError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + "; lower the learning rate");
      }
      loss.backward();
      adamw_step(params, state);
      for (auto& p : params) p.clear_grad();

      report.step_losses.push_back(value);
      loss_sum += value;
      ++loss_count;
      if (options.on_step) options.on_step(step, value);
      ++step;
      if (options.max_steps != 0 && step >= options.max_steps) {
        stop = true;
        break;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    if (options.validate) {
      rec.val_auc = evaluate(model, val_split, val_features, norm, batch).auc;
      if (!report.best_val_auc || *rec.val_auc > *report.best_val_auc) {
        report.best_val_auc = rec.val_auc;
        report.best_epoch = epoch;
        best = copy_values(params);
      }
    } else {
      report.best_epoch = epoch;
    }
    report.epochs.push_back(rec);
  }

  if (options.validate && report.best_val_auc) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::copy(best[i].begin(), best[i].end(), params[i].mutable_values().begin());
    }
  }
  if (report.best_epoch >= 0) {
    report.best_checkpoint = "epoch-" + std::to_string(report.best_epoch);
  }
  return report;
}

EvalResult evaluate(const FptModel& model, const Split& split, const FeatureProvider& features,
                    const Normalizer& norm, std::size_t batch_size) {
  NoGradGuard no_grad;
  EvalResult result;
  const std::size_t n = split.samples.size();
  const std::size_t classes = model.side.dims.num_classes;
  const std::size_t low = model.side_image_size();
  const auto resize = [low](const Image& img, std::size_t) { return resize_bilinear(img, low); };
  batch_size = std::max<std::size_t>(1, batch_size);
  for (std::size_t lo = 0; lo < n; lo += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, n - lo));
    std::iota(idx.begin(), idx.end(), lo);
    const auto logits = forward_batch(model, split, idx, features, norm, resize, nullptr);
    const auto lv = logits.values();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const float* row = lv.data() + b * classes;
      const double mx = *std::max_element(row, row + classes);
      double z = 0.0;
      for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
      for (std::size_t c = 0; c < classes; ++c) {
        result.probabilities.push_back(std::exp(row[c] - mx) / z);
      }
      result.labels.push_back(split.samples[idx[b]].label);
    }
  }
  result.auc = macro_auc(result.probabilities, classes, result.labels);
  return result;
}

FreezeSnapshot snapshot_backbone(const FptModel& model) {
  FreezeSnapshot snap;
  if (model.backbone) {
    for (const auto& [name, t] : model.backbone->named_tensors()) {
      snap.tensors.emplace_back(name, std::vector<float>(t.values().begin(), t.values().end()));
    }
  }
  return snap;
}

FreezeReport freeze_check(const FptModel& model, const FreezeSnapshot& snapshot) {
  FreezeReport report;
  if (!model.backbone) {
    return report;
  }
  const auto current = model.backbone->named_tensors();
  if (current.size() != snapshot.tensors.size()) {
    report.passed = false;
    report.failures.push_back("backbone tensor count changed from " +
                              std::to_string(snapshot.tensors.size()) + " to " +
                              std::to_string(current.size()));
    return report;
  }
  for (std::size_t i = 0; i < current.size(); ++i) {
    const auto& [name, t] = current[i];
    const auto& ref = snapshot.tensors[i].second;
    const auto v = t.values();
    const bool same = v.size() == ref.size() &&
                      std::equal(v.begin(), v.end(), ref.begin(), [](float a, float b) {
                        return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b);
                      });
    if (!same) report.failures.push_back(name + ": values changed");
    if (t.has_grad()) report.failures.push_back(name + ": holds a gradient buffer");
    if (t.requires_grad()) report.failures.push_back(name + ": flagged learnable");
  }
  report.passed = report.failures.empty();
  return report;
}

std::vector<std::string> tensors_with_grad(const FptModel& model) {
  std::vector<std::string> out;
  for (const auto& [name, t] : model.named_tensors()) {
    if (t.has_grad()) out.push_back(name);
  }
  return out;
}

}  // namespace fpt

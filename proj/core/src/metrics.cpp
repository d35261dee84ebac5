// SPDX-License-Identifier: Apache-2.0
#include "fpt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "fpt/errors.hpp"
#include "fpt/selection.hpp"

namespace fpt {

template <typename T>
std::uint64_t count_params(std::span<const NamedTensor<T>> tensors, bool learnable_only) {
  std::uint64_t total = 0;
  for (const auto& [name, t] : tensors) {
    if (!learnable_only || t.requires_grad()) {
      total += t.numel();
    }
  }
  return total;
}

template std::uint64_t count_params(std::span<const NamedTensor<float>>, bool);
template std::uint64_t count_params(std::span<const NamedTensor<double>>, bool);

double ParameterInventory::ratio() const {
  return total() == 0 ? 0.0 : static_cast<double>(learnable) / static_cast<double>(total());
}

namespace {

using u64 = std::uint64_t;

u64 block_params(u64 d, u64 r) {
  return 2 * d + 4 * (d * d + d) + 2 * d + (d * r * d + r * d) + (r * d * d + d);
}

u64 vit_params(u64 patch, u64 d, u64 positions, u64 layers, u64 r) {
  return 3 * patch * patch * d + d + d + positions * d + layers * block_params(d, r);
}

struct Shapes {
  u64 patch, layers, r, classes;
  u64 d_m, h_m, n_m;
  u64 d_s, h_s, n_s;
  u64 prompts, selected;
  bool fusion;
};

Shapes resolve(const FptConfig& cfg, TrainMode mode) {
  cfg.validate();
  const auto& b = cfg.backbone;
  Shapes s{};
  s.patch = static_cast<u64>(b.patch_size);
  s.layers = static_cast<u64>(b.layers);
  s.r = static_cast<u64>(b.mlp_ratio);
  s.classes = static_cast<u64>(cfg.side.num_classes);
  s.d_m = static_cast<u64>(b.dim);
  s.h_m = static_cast<u64>(b.heads);
  s.n_m = static_cast<u64>(b.tokens());
  s.d_s = static_cast<u64>(cfg.side_dim());
  s.h_s = static_cast<u64>(cfg.side_heads());
  s.n_s = mode == TrainMode::fpt_symmetric ? s.n_m : static_cast<u64>(cfg.side_tokens());
  s.fusion = mode != TrainMode::side_only;
  s.prompts = s.fusion ? static_cast<u64>(cfg.side.num_prompts) : 0;
  const double ratio = mode == TrainMode::fpt_no_selection ? 1.0 : cfg.selection.ratio;
  s.selected = s.fusion ? selected_count(s.n_m, ratio, cfg.selection.keep_cls) : 0;
  return s;
}

}  // namespace

ParameterInventory parameter_inventory(const FptConfig& cfg, TrainMode mode) {
  const auto s = resolve(cfg, mode);
  ParameterInventory inv;
  inv.learnable = vit_params(s.patch, s.d_s, s.n_s, s.layers, s.r) + 2 * s.d_s +
                  s.d_s * s.classes + s.classes;
  if (s.fusion) {
    const u64 prompt_sets = cfg.side.shared_prompts ? 1 : s.layers;
    inv.learnable += prompt_sets * s.prompts * s.d_s;
    inv.learnable += s.layers * (s.d_s * s.d_m + s.d_m + s.d_m * s.d_s + s.d_s);
    const auto g0 = static_cast<u64>(cfg.backbone.pretrain_grid);
    inv.frozen = vit_params(s.patch, s.d_m, 1 + g0 * g0, s.layers, s.r);
  }
  return inv;
}

ParameterInventory full_finetune_inventory(const FptConfig& cfg) {
  const auto s = resolve(cfg, TrainMode::fpt);
  const auto g0 = static_cast<u64>(cfg.backbone.pretrain_grid);
  ParameterInventory inv;
  inv.learnable = vit_params(s.patch, s.d_m, 1 + g0 * g0, s.layers, s.r) + 2 * s.d_m +
                  s.d_m * s.classes + s.classes;
  return inv;
}

u64 block_retained(u64 n, u64 d, u64 heads, u64 mlp_ratio) {
  return 8 * n * d + heads * n * n + 2 * mlp_ratio * n * d;
}

u64 ffm_retained(u64 prompts, u64 selected, u64 side_dim, u64 backbone_dim, u64 backbone_heads) {
  return prompts * side_dim + 2 * prompts * backbone_dim + 2 * selected * backbone_dim +
         backbone_heads * prompts * selected;
}

MemoryEstimate estimate_activation_memory(const FptConfig& cfg, TrainMode mode, bool cached) {
  const auto s = resolve(cfg, mode);
  MemoryEstimate est;
  const u64 seq = s.n_s + s.prompts;
  for (u64 l = 0; l < s.layers; ++l) {
    est.retained += block_retained(seq, s.d_s, s.h_s, s.r);
    if (s.fusion && s.prompts > 0) {
      est.fusion += ffm_retained(s.prompts, s.selected, s.d_s, s.d_m, s.h_m);
    }
  }
  est.retained += est.fusion;
  est.retained += (s.n_s - 1) * 3 * s.patch * s.patch + s.n_s * s.d_s + s.d_s;
  if (s.fusion && !cached) {
    est.transient = block_retained(s.n_m, s.d_m, s.h_m, s.r);
  }
  return est;
}

MemoryEstimate estimate_full_finetune_memory(const FptConfig& cfg) {
  const auto s = resolve(cfg, TrainMode::fpt);
  MemoryEstimate est;
  est.retained = s.layers * block_retained(s.n_m, s.d_m, s.h_m, s.r) +
                 (s.n_m - 1) * 3 * s.patch * s.patch + s.n_m * s.d_m + s.d_m;
  return est;
}

namespace {

double efficiency(double score, double ratio, const char* what) {
  if (ratio < 0.0 || std::isnan(ratio)) {
    throw DomainError(std::string(what) + " ratio must be >= 0, got " + std::to_string(ratio));
  }
  return score * std::exp(-std::log10(ratio + 1.0));
}

}  // namespace

double ppe(double score, double r) { return efficiency(score, r, "parameter"); }

double pme(double score, double m_mem) { return efficiency(score, m_mem, "memory"); }

double binary_auc(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) {
    throw ShapeError("binary_auc: scores and labels differ in length");
  }
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        rank_sum += midrank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw UndefinedAucError("AUC is undefined: the split holds only one class");
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

double macro_auc(std::span<const double> probabilities, std::size_t classes,
                 std::span<const int> labels) {
  const std::size_t n = labels.size();
  if (probabilities.size() != n * classes) {
    throw ShapeError("macro_auc: probabilities must be (n, classes)");
  }
  std::vector<std::size_t> counts(classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw IndexError("macro_auc: label " + std::to_string(y) + " out of range");
    }
    ++counts[static_cast<std::size_t>(y)];
  }
  std::size_t present = 0;
  for (auto c : counts) present += c > 0 ? 1 : 0;
  if (present < 2) {
    throw UndefinedAucError("AUC is undefined: the split holds only one class");
  }
  double total = 0.0;
  std::vector<double> column(n);
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0) continue;
    std::unique_ptr<bool[]> flags(new bool[n]);
    for (std::size_t i = 0; i < n; ++i) {
      column[i] = probabilities[i * classes + c];
      flags[i] = labels[i] == static_cast<int>(c);
    }
    total += binary_auc(column, std::span<const bool>(flags.get(), n));
  }
  return total / static_cast<double>(present);
}

EfficiencyReport EfficiencyReport::make(double score, double r, double m_mem) {
  return {score, r, m_mem, fpt::ppe(score, r), fpt::pme(score, m_mem)};
}

nlohmann::json EfficiencyReport::to_json() const {
  return {{"score", score}, {"r", r}, {"m_mem", m_mem}, {"ppe", ppe}, {"pme", pme}};
}

}  // namespace fpt

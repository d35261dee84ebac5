// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpt/config.hpp"
#include "fpt/layers.hpp"

namespace fpt {

/// Element count of the named tensors, optionally only the learnable ones.
template <typename T>
std::uint64_t count_params(std::span<const NamedTensor<T>> tensors, bool learnable_only);

/// Parameter counts derived from shapes alone, without allocating a model.
struct ParameterInventory {
  std::uint64_t frozen = 0;
  std::uint64_t learnable = 0;
  std::uint64_t total() const { return frozen + learnable; }
  /// Learnable over frozen + learnable.
  double ratio() const;
};

ParameterInventory parameter_inventory(const FptConfig& cfg, TrainMode mode);
/// Every parameter of the backbone plus a linear head, all learnable.
ParameterInventory full_finetune_inventory(const FptConfig& cfg);

/// Retained-activation model, version 1. Counts elements kept for backward
/// per sample. For a pre-norm block over n tokens of width d, h heads, MLP
/// ratio r:
///   block(n, d, h, r) = 8 n d + h n^2 + 2 r n d
/// (norm inputs and outputs, q/k/v, attention output, the map, MLP hidden
/// before and after GELU). One fusion module with P prompts and S selected
/// tokens adds
///   ffm(P, S) = P d_S + 2 P d_M + 2 S d_M + h_M P S.
/// The patch-embedding input (N_patch * 3 p^2) and the final norm and head
/// inputs (N d + d) are counted for trainable embeddings. The frozen forward
/// keeps nothing for backward; its peak transient (one block at N_M) is
/// reported separately.
inline constexpr int kMemoryModelVersion = 1;

std::uint64_t block_retained(std::uint64_t n, std::uint64_t d, std::uint64_t heads,
                             std::uint64_t mlp_ratio);
std::uint64_t ffm_retained(std::uint64_t prompts, std::uint64_t selected, std::uint64_t side_dim,
                           std::uint64_t backbone_dim, std::uint64_t backbone_heads);

struct MemoryEstimate {
  std::uint64_t retained = 0;
  std::uint64_t fusion = 0;     // the ffm terms summed over layers, part of retained
  std::uint64_t transient = 0;  // frozen forward peak, not retained
  int version = kMemoryModelVersion;
};

/// `cached` drops the frozen forward entirely (no transient either).
MemoryEstimate estimate_activation_memory(const FptConfig& cfg, TrainMode mode,
                                          bool cached = true);
MemoryEstimate estimate_full_finetune_memory(const FptConfig& cfg);

/// score * exp(-log10(ratio + 1)); throws DomainError for a negative ratio.
double ppe(double score, double r);
double pme(double score, double m_mem);

/// Area under the ROC curve of `scores` for the positives, ties by midrank.
/// Throws UndefinedAucError when either class is empty.
double binary_auc(std::span<const double> scores, std::span<const bool> positive);

/// Macro one-vs-rest AUC. `probabilities` is (n, classes) row-major. Classes
/// with no positives in `labels` are left out of the mean; fewer than two
/// present classes is an UndefinedAucError.
double macro_auc(std::span<const double> probabilities, std::size_t classes,
                 std::span<const int> labels);

struct EfficiencyReport {
  double score = 0.0;  // 0 to 100
  double r = 0.0;
  double m_mem = 0.0;
  double ppe = 0.0;
  double pme = 0.0;

  static EfficiencyReport make(double score, double r, double m_mem);
  nlohmann::json to_json() const;
};

}  // namespace fpt

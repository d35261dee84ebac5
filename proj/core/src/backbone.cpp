// SPDX-License-Identifier: Apache-2.0
#include "fpt/backbone.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "fpt/hash.hpp"
#include "fpt/tensor_archive.hpp"

namespace fpt {

template <typename T>
BackboneWeights<T> BackboneWeights<T>::random(const BackboneConfig& cfg) {
  Rng rng(mix_seed(cfg.weight_seed, 0xB4C4B0E));
  const auto d = static_cast<std::size_t>(cfg.dim);
  const auto p = static_cast<std::size_t>(cfg.patch_size);
  const auto g = static_cast<std::size_t>(cfg.pretrain_grid);
  BackboneWeights w;
  w.patch_embed = Linear<T>::xavier(3 * p * p, d, rng, false);
  w.cls_token = normal_tensor<T>(Shape{d}, 0.02, rng, false);
  w.pos_embed = normal_tensor<T>(Shape{1 + g * g, d}, 0.02, rng, false);
  for (int l = 0; l < cfg.layers; ++l) {
    w.blocks.push_back(BlockWeights<T>::create(d, static_cast<std::size_t>(cfg.heads),
                                               static_cast<std::size_t>(cfg.mlp_ratio), rng,
                                               false));
  }
  return w;
}

template <typename T>
std::vector<NamedTensor<T>> BackboneWeights<T>::named_tensors() const {
  std::vector<NamedTensor<T>> out;
  patch_embed.collect(out, "backbone.patch_embed");
  out.push_back({"backbone.cls_token", cls_token});
  out.push_back({"backbone.pos_embed", pos_embed});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].collect(out, "backbone.blocks." + std::to_string(l));
  }
  return out;
}

namespace {

double cubic_weight(double x) {
  constexpr double a = -0.75;
  x = std::abs(x);
  if (x <= 1.0) {
    return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  }
  if (x < 2.0) {
    return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  }
  return 0.0;
}

struct Taps {
  std::array<std::size_t, 4> index;
  std::array<double, 4> weight;
};

Taps bicubic_taps(std::size_t out, std::size_t in_size, std::size_t out_size) {
  const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  const double src = (static_cast<double>(out) + 0.5) * scale - 0.5;
  const double base = std::floor(src);
  const double t = src - base;
  Taps taps{};
  for (int k = 0; k < 4; ++k) {
    const auto raw = static_cast<long>(base) - 1 + k;
    taps.index[k] =
        static_cast<std::size_t>(std::clamp<long>(raw, 0, static_cast<long>(in_size) - 1));
    taps.weight[k] = cubic_weight(t - static_cast<double>(k - 1));
  }
  return taps;
}

}  // namespace

template <typename T>
std::vector<T> interpolate_pos_embed(std::span<const T> pos, std::size_t dim, std::size_t grid,
                                     std::size_t target_grid, bool has_cls) {
  const std::size_t offset = has_cls ? 1 : 0;
  if (pos.size() != (offset + grid * grid) * dim) {
    throw ShapeError("interpolate_pos_embed: table size does not match grid " +
                     std::to_string(grid));
  }
  if (grid == target_grid) {
    return {pos.begin(), pos.end()};
  }
  std::vector<T> out((offset + target_grid * target_grid) * dim);
  std::copy_n(pos.begin(), offset * dim, out.begin());

  // Separable: resample columns of every source row, then rows.
  std::vector<double> horiz(grid * target_grid * dim, 0.0);
  for (std::size_t x = 0; x < target_grid; ++x) {
    const auto taps = bicubic_taps(x, grid, target_grid);
    for (std::size_t y = 0; y < grid; ++y) {
      for (int k = 0; k < 4; ++k) {
        const T* src = pos.data() + (offset + y * grid + taps.index[k]) * dim;
        double* dst = horiz.data() + (y * target_grid + x) * dim;
        for (std::size_t c = 0; c < dim; ++c) {
          dst[c] += taps.weight[k] * static_cast<double>(src[c]);
        }
      }
    }
  }
  for (std::size_t y = 0; y < target_grid; ++y) {
    const auto taps = bicubic_taps(y, grid, target_grid);
    for (std::size_t x = 0; x < target_grid; ++x) {
      T* dst = out.data() + (offset + y * target_grid + x) * dim;
      for (std::size_t c = 0; c < dim; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) {
          acc += taps.weight[k] * horiz[(taps.index[k] * target_grid + x) * dim + c];
        }
        dst[c] = static_cast<T>(acc);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& images, const BackboneConfig& cfg,
                      const BackboneWeights<T>& weights, const Tensor<T>& pos_embed) {
  if (cfg.patch_size <= 0 || cfg.image_size_high % cfg.patch_size != 0) {
    throw ConfigError("patch_embed: image size " + std::to_string(cfg.image_size_high) +
                      " not divisible by patch " + std::to_string(cfg.patch_size));
  }
  if (images.rank() != 4 || images.dim(1) != 3 ||
      images.dim(2) != static_cast<std::size_t>(cfg.image_size_high) ||
      images.dim(3) != static_cast<std::size_t>(cfg.image_size_high)) {
    throw ConfigError("patch_embed: expected (B, 3, " + std::to_string(cfg.image_size_high) +
                      ", " + std::to_string(cfg.image_size_high) + ") images, got " +
                      shape_str(images.shape()));
  }
  return embed_patches(images, static_cast<std::size_t>(cfg.patch_size), weights.patch_embed,
                       weights.cls_token, pos_embed);
}

template <typename T>
Backbone<T>::Backbone(BackboneConfig cfg, BackboneWeights<T> weights)
    : cfg_(std::move(cfg)), weights_(std::move(weights)) {
  if (cfg_.patch_size <= 0 || cfg_.image_size_high % cfg_.patch_size != 0) {
    throw ConfigError("backbone: image size not divisible by patch size");
  }
  if (weights_.blocks.size() != static_cast<std::size_t>(cfg_.layers)) {
    throw ConfigError("backbone: weights hold " + std::to_string(weights_.blocks.size()) +
                      " layers, config says " + std::to_string(cfg_.layers));
  }
  const auto d = static_cast<std::size_t>(cfg_.dim);
  const auto g = static_cast<std::size_t>(cfg_.grid());
  auto resampled = interpolate_pos_embed<T>(weights_.pos_embed.values(), d,
                                            static_cast<std::size_t>(cfg_.pretrain_grid), g);
  pos_target_ = Tensor<T>(Shape{1 + g * g, d}, std::move(resampled), false);
}

template <typename T>
Backbone<T> Backbone<T>::create(const BackboneConfig& cfg) {
  if constexpr (std::is_same_v<T, float>) {
    if (!cfg.weights_path.empty()) {
      return Backbone(cfg, load_backbone_weights(cfg.weights_path, cfg));
    }
  }
  return Backbone(cfg, BackboneWeights<T>::random(cfg));
}

template <typename T>
void Backbone<T>::check_frozen() const {
  for (const auto& [name, t] : weights_.named_tensors()) {
    if (t.requires_grad()) {
      throw FreezeContractError("backbone tensor '" + name + "' is not frozen");
    }
  }
}

template <typename T>
void Backbone<T>::forward_streaming(const Tensor<T>& images, const TapVisitor& visit) const {
  check_frozen();
  NoGradGuard no_grad;
  Tensor<T> z = patch_embed(images, cfg_, weights_, pos_target_);
  for (std::size_t l = 0; l < weights_.blocks.size(); ++l) {
    auto trace = block_forward(weights_.blocks[l], z);
    LayerTap<T> tap{trace.output, std::move(trace.attn_map), std::move(trace.keys),
                    std::move(trace.values)};
    visit(l, tap);
    z = std::move(trace.output);
  }
}

template <typename T>
std::vector<LayerTap<T>> Backbone<T>::forward(const Tensor<T>& images) const {
  std::vector<LayerTap<T>> taps;
  taps.reserve(weights_.blocks.size());
  forward_streaming(images, [&](std::size_t, const LayerTap<T>& tap) { taps.push_back(tap); });
  return taps;
}

template <typename T>
std::uint64_t Backbone<T>::identity() const {
  Fnv1a h;
  h.i64(cfg_.dim).i64(cfg_.layers).i64(cfg_.heads).i64(cfg_.mlp_ratio).i64(cfg_.patch_size);
  for (const auto& [name, t] : weights_.named_tensors()) {
    h.str(name);
    for (T v : t.values()) {
      h.f64(static_cast<double>(v));
    }
  }
  return h.digest();
}

namespace {

nlohmann::json backbone_meta(const BackboneConfig& cfg) {
  return {{"kind", "backbone"},
          {"layers", cfg.layers},
          {"dim", cfg.dim},
          {"heads", cfg.heads},
          {"mlp_ratio", cfg.mlp_ratio},
          {"patch_size", cfg.patch_size},
          {"pretrain_grid", cfg.pretrain_grid}};
}

}  // namespace

void save_backbone_weights(const std::filesystem::path& path, const BackboneConfig& cfg,
                           const BackboneWeights<float>& weights) {
  std::vector<ArchiveTensor> tensors;
  for (const auto& [name, t] : weights.named_tensors()) {
    tensors.push_back({name, t.shape(), {t.values().begin(), t.values().end()}});
  }
  write_tensor_archive(path, "FPTW", backbone_meta(cfg), tensors);
}

BackboneWeights<float> load_backbone_weights(const std::filesystem::path& path,
                                             const BackboneConfig& cfg) {
  const auto archive = read_tensor_archive(path, "FPTW");
  const auto expected = backbone_meta(cfg);
  for (const auto& [key, value] : expected.items()) {
    if (!archive.header.contains(key) || archive.header[key] != value) {
      throw ConfigError("weight archive '" + path.string() + "' disagrees with config on '" +
                        key + "'");
    }
  }
  // Shapes come from a template with the declared config; values from the file.
  auto weights = BackboneWeights<float>::random(cfg);
  const auto named = weights.named_tensors();
  if (archive.tensors.size() != named.size()) {
    throw ConfigError("weight archive '" + path.string() + "' holds " +
                      std::to_string(archive.tensors.size()) + " tensors, expected " +
                      std::to_string(named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& src = archive.tensors[i];
    auto dst = named[i].tensor;
    if (src.name != named[i].name || src.shape != dst.shape()) {
      throw ConfigError("weight archive tensor " + std::to_string(i) + " ('" + src.name +
                        "', " + shape_str(src.shape) + ") does not match '" + named[i].name +
                        "' " + shape_str(dst.shape()));
    }
    std::copy(src.values.begin(), src.values.end(), dst.mutable_values().begin());
  }
  return weights;
}

template struct BackboneWeights<float>;
template struct BackboneWeights<double>;
template class Backbone<float>;
template class Backbone<double>;
template std::vector<float> interpolate_pos_embed(std::span<const float>, std::size_t,
                                                  std::size_t, std::size_t, bool);
template std::vector<double> interpolate_pos_embed(std::span<const double>, std::size_t,
                                                   std::size_t, std::size_t, bool);
template Tensor<float> patch_embed(const Tensor<float>&, const BackboneConfig&,
                                   const BackboneWeights<float>&, const Tensor<float>&);
template Tensor<double> patch_embed(const Tensor<double>&, const BackboneConfig&,
                                    const BackboneWeights<double>&, const Tensor<double>&);

}  // namespace fpt

// SPDX-License-Identifier: Apache-2.0
#include "fpt/fusion.hpp"

#include "fpt/hash.hpp"
#include "fpt/tensor_archive.hpp"

namespace fpt {

SideDims SideDims::from_config(const FptConfig& cfg, TrainMode mode) {
  cfg.validate();
  SideDims d;
  d.image_size = static_cast<std::size_t>(mode == TrainMode::fpt_symmetric
                                              ? cfg.backbone.image_size_high
                                              : cfg.side.image_size_low);
  d.patch = static_cast<std::size_t>(cfg.backbone.patch_size);
  d.dim = static_cast<std::size_t>(cfg.side_dim());
  d.heads = static_cast<std::size_t>(cfg.side_heads());
  d.layers = static_cast<std::size_t>(cfg.backbone.layers);
  d.mlp_ratio = static_cast<std::size_t>(cfg.backbone.mlp_ratio);
  d.fusion = mode != TrainMode::side_only;
  d.num_prompts = d.fusion ? static_cast<std::size_t>(cfg.side.num_prompts) : 0;
  d.num_classes = static_cast<std::size_t>(cfg.side.num_classes);
  d.backbone_dim = static_cast<std::size_t>(cfg.backbone.dim);
  d.backbone_heads = static_cast<std::size_t>(cfg.backbone.heads);
  d.shared_prompts = cfg.side.shared_prompts;
  d.dropout = cfg.side.dropout;
  return d;
}

template <typename T>
SideNetwork<T> SideNetwork<T>::create(const SideDims& dims, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x51DE));
  SideNetwork net;
  net.dims = dims;
  const std::size_t d = dims.dim;
  net.patch_embed = Linear<T>::xavier(3 * dims.patch * dims.patch, d, rng, true);
  net.cls_token = normal_tensor<T>(Shape{d}, 0.02, rng, true);
  net.pos_embed = normal_tensor<T>(Shape{dims.tokens(), d}, 0.02, rng, true);
  for (std::size_t l = 0; l < dims.layers; ++l) {
    net.blocks.push_back(BlockWeights<T>::create(d, dims.heads, dims.mlp_ratio, rng, true));
  }
  net.final_norm = LayerNormParams<T>::identity(d, true);
  net.head = Linear<T>::xavier(d, dims.num_classes, rng, true);
  if (dims.fusion) {
    const std::size_t prompt_sets = dims.shared_prompts ? 1 : dims.layers;
    for (std::size_t l = 0; l < prompt_sets; ++l) {
      net.prompts.push_back(normal_tensor<T>(Shape{dims.num_prompts, d}, 0.02, rng, true));
    }
    for (std::size_t l = 0; l < dims.layers; ++l) {
      FusionWeights<T> w;
      w.f_in = Linear<T>::xavier(d, dims.backbone_dim, rng, true);
      w.f_out = Linear<T>::zeros(dims.backbone_dim, d, true);
      net.fusion.push_back(std::move(w));
    }
  }
  return net;
}

template <typename T>
const Tensor<T>& SideNetwork<T>::prompts_for(std::size_t layer) const {
  if (prompts.empty()) {
    throw LookupError("side network has no prompts");
  }
  return prompts.size() == 1 ? prompts[0] : prompts.at(layer);
}

template <typename T>
std::vector<NamedTensor<T>> SideNetwork<T>::named_parameters() const {
  std::vector<NamedTensor<T>> out;
  patch_embed.collect(out, "side.patch_embed");
  out.push_back({"side.cls_token", cls_token});
  out.push_back({"side.pos_embed", pos_embed});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].collect(out, "side.blocks." + std::to_string(l));
  }
  final_norm.collect(out, "side.final_norm");
  for (std::size_t l = 0; l < prompts.size(); ++l) {
    out.push_back({"prompts." + std::to_string(l), prompts[l]});
  }
  for (std::size_t l = 0; l < fusion.size(); ++l) {
    fusion[l].f_in.collect(out, "fusion." + std::to_string(l) + ".f_in");
    fusion[l].f_out.collect(out, "fusion." + std::to_string(l) + ".f_out");
  }
  head.collect(out, "head");
  return out;
}

template <typename T>
FfmOutput<T> ffm_forward(const Tensor<T>& z_side, const LayerFusionFeatures<T>& fused,
                         const Tensor<T>& prompts, const FusionWeights<T>& weights,
                         std::size_t layer) {
  if (fused.layer != layer) {
    throw LookupError("ffm_forward: side layer " + std::to_string(layer) +
                      " received features of layer " + std::to_string(fused.layer));
  }
  if (z_side.rank() != 3 || prompts.rank() != 2 || prompts.dim(1) != z_side.dim(2)) {
    throw ShapeError("ffm_forward: z_S " + shape_str(z_side.shape()) + " and prompts " +
                     shape_str(prompts.shape()) + " disagree");
  }
  const std::size_t batch = z_side.dim(0);
  const std::size_t num_prompts = prompts.dim(0);
  if (num_prompts == 0) {
    return {z_side, Tensor<T>()};
  }
  if (fused.batch != batch) {
    throw ShapeError("ffm_forward: features carry batch " + std::to_string(fused.batch) +
                     ", side sequence has " + std::to_string(batch));
  }
  auto queries = weights.f_in(prompts);  // (P, d_M)
  auto q = ops::split_heads(ops::expand_batch(queries, batch), fused.heads);
  auto ca = ops::scaled_dot_attention(q, fused.keys, fused.values);
  auto mapped = weights.f_out(ops::merge_heads(ca.output));  // (B, P, d_S)
  auto prompt_rows = ops::add(mapped, prompts);
  return {ops::concat_tokens(z_side, prompt_rows), std::move(ca.map)};
}

template <typename T>
Tensor<T> side_layer_forward(std::size_t layer, const Tensor<T>& z_side,
                             const LayerFusionFeatures<T>* fused, const Tensor<T>* prompts,
                             const FusionWeights<T>* fusion, const BlockWeights<T>& block,
                             double dropout, Rng* rng, SideLayerTrace* trace) {
  const std::size_t n_side = z_side.dim(1);
  Tensor<T> sequence = z_side;
  Shape map_shape;
  if (fusion != nullptr) {
    if (fused == nullptr || prompts == nullptr) {
      throw LookupError("side layer " + std::to_string(layer) + " is missing fusion features");
    }
    auto out = ffm_forward(z_side, *fused, *prompts, *fusion, layer);
    sequence = std::move(out.sequence);
    if (out.cross_map.defined()) {
      map_shape = out.cross_map.shape();
    }
  }
  auto processed = block_forward(block, sequence, dropout, rng).output;
  auto result = ops::slice_tokens(processed, 0, n_side);
  if (trace != nullptr) {
    *trace = {n_side, sequence.dim(1), result.dim(1), std::move(map_shape)};
  }
  return result;
}

template <typename T>
Tensor<T> side_forward(const Tensor<T>& images_low, std::span<const LayerFusionFeatures<T>> features,
                       const SideNetwork<T>& net, Rng* dropout_rng,
                       std::vector<SideLayerTrace>* trace) {
  const auto& dims = net.dims;
  if (images_low.rank() != 4 || images_low.dim(1) != 3 || images_low.dim(2) != dims.image_size ||
      images_low.dim(3) != dims.image_size) {
    throw ShapeError("side_forward: expected (B, 3, " + std::to_string(dims.image_size) + ", " +
                     std::to_string(dims.image_size) + ") images, got " +
                     shape_str(images_low.shape()));
  }
  if (net.has_fusion() && features.size() != dims.layers) {
    throw LookupError("side_forward: expected " + std::to_string(dims.layers) +
                      " fusion feature sets, got " + std::to_string(features.size()));
  }
  const double dropout = dropout_rng != nullptr ? dims.dropout : 0.0;
  if (trace != nullptr) {
    trace->assign(dims.layers, {});
  }
  auto z = embed_patches(images_low, dims.patch, net.patch_embed, net.cls_token, net.pos_embed);
  for (std::size_t l = 0; l < dims.layers; ++l) {
    const bool fuse = net.has_fusion();
    z = side_layer_forward(l, z, fuse ? &features[l] : nullptr,
                           fuse ? &net.prompts_for(l) : nullptr, fuse ? &net.fusion[l] : nullptr,
                           net.blocks[l], dropout, dropout_rng,
                           trace != nullptr ? &(*trace)[l] : nullptr);
  }
  auto cls = ops::reshape(ops::slice_tokens(net.final_norm(z), 0, 1),
                          Shape{images_low.dim(0), dims.dim});
  return net.head(cls);
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config_echo,
                     std::uint64_t backbone_identity, const SideNetwork<float>& net) {
  std::vector<ArchiveTensor> tensors;
  for (const auto& [name, t] : net.named_parameters()) {
    if (t.requires_grad()) {
      tensors.push_back({name, t.shape(), {t.values().begin(), t.values().end()}});
    }
  }
  nlohmann::json meta = {{"kind", "checkpoint"},
                         {"config", config_echo},
                         {"backbone_identity", hex64(backbone_identity)}};
  write_tensor_archive(path, "FPTK", meta, tensors);
}

nlohmann::json load_checkpoint(const std::filesystem::path& path, SideNetwork<float>& net) {
  auto archive = read_tensor_archive(path, "FPTK");
  for (auto& [name, t] : net.named_parameters()) {
    const auto& src = archive.at(name);
    if (src.shape != t.shape()) {
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape) +
                        ", model expects " + shape_str(t.shape()));
    }
    std::copy(src.values.begin(), src.values.end(), t.mutable_values().begin());
  }
  return archive.header;
}

template struct SideNetwork<float>;
template struct SideNetwork<double>;
template FfmOutput<float> ffm_forward(const Tensor<float>&, const LayerFusionFeatures<float>&,
                                      const Tensor<float>&, const FusionWeights<float>&,
                                      std::size_t);
template FfmOutput<double> ffm_forward(const Tensor<double>&, const LayerFusionFeatures<double>&,
                                       const Tensor<double>&, const FusionWeights<double>&,
                                       std::size_t);
template Tensor<float> side_layer_forward(std::size_t, const Tensor<float>&,
                                          const LayerFusionFeatures<float>*, const Tensor<float>*,
                                          const FusionWeights<float>*, const BlockWeights<float>&,
                                          double, Rng*, SideLayerTrace*);
template Tensor<double> side_layer_forward(std::size_t, const Tensor<double>&,
                                           const LayerFusionFeatures<double>*,
                                           const Tensor<double>*, const FusionWeights<double>*,
                                           const BlockWeights<double>&, double, Rng*,
                                           SideLayerTrace*);
template Tensor<float> side_forward(const Tensor<float>&, std::span<const LayerFusionFeatures<float>>,
                                    const SideNetwork<float>&, Rng*, std::vector<SideLayerTrace>*);
template Tensor<double> side_forward(const Tensor<double>&,
                                     std::span<const LayerFusionFeatures<double>>,
                                     const SideNetwork<double>&, Rng*,
                                     std::vector<SideLayerTrace>*);

}  // namespace fpt

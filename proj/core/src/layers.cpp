// SPDX-License-Identifier: Apache-2.0
#include "fpt/layers.hpp"

#include <cmath>

namespace fpt {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng, bool learnable) {
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) {
    v = T(rng.normal(0.0, stddev));
  }
  return Tensor<T>(std::move(shape), std::move(values), learnable);
}

template <typename T>
Linear<T> Linear<T>::xavier(std::size_t in, std::size_t out, Rng& rng, bool learnable) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<T> w(in * out);
  for (auto& v : w) {
    v = T(rng.uniform(-bound, bound));
  }
  return {Tensor<T>(Shape{in, out}, std::move(w), learnable), Tensor<T>(Shape{out}, learnable)};
}

template <typename T>
Linear<T> Linear<T>::zeros(std::size_t in, std::size_t out, bool learnable) {
  return {Tensor<T>(Shape{in, out}, learnable), Tensor<T>(Shape{out}, learnable)};
}

template <typename T>
void Linear<T>::collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::identity(std::size_t dim, bool learnable) {
  return {Tensor<T>::full(Shape{dim}, T(1), learnable), Tensor<T>(Shape{dim}, learnable), T(1e-6)};
}

template <typename T>
void LayerNormParams<T>::collect(std::vector<NamedTensor<T>>& out,
                                 const std::string& prefix) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

template <typename T>
BlockWeights<T> BlockWeights<T>::create(std::size_t dim, std::size_t heads, std::size_t mlp_ratio,
                                        Rng& rng, bool learnable) {
  BlockWeights w;
  w.heads = heads;
  w.norm1 = LayerNormParams<T>::identity(dim, learnable);
  w.q = Linear<T>::xavier(dim, dim, rng, learnable);
  w.k = Linear<T>::xavier(dim, dim, rng, learnable);
  w.v = Linear<T>::xavier(dim, dim, rng, learnable);
  w.proj = Linear<T>::xavier(dim, dim, rng, learnable);
  w.norm2 = LayerNormParams<T>::identity(dim, learnable);
  w.fc1 = Linear<T>::xavier(dim, dim * mlp_ratio, rng, learnable);
  w.fc2 = Linear<T>::xavier(dim * mlp_ratio, dim, rng, learnable);
  return w;
}

template <typename T>
void BlockWeights<T>::collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const {
  norm1.collect(out, prefix + ".norm1");
  q.collect(out, prefix + ".attn.q");
  k.collect(out, prefix + ".attn.k");
  v.collect(out, prefix + ".attn.v");
  proj.collect(out, prefix + ".attn.proj");
  norm2.collect(out, prefix + ".norm2");
  fc1.collect(out, prefix + ".mlp.fc1");
  fc2.collect(out, prefix + ".mlp.fc2");
}

template <typename T>
BlockTrace<T> block_forward(const BlockWeights<T>& w, const Tensor<T>& x, double dropout,
                            Rng* rng) {
  const auto normed = w.norm1(x);
  auto q = ops::split_heads(w.q(normed), w.heads);
  auto k = ops::split_heads(w.k(normed), w.heads);
  auto v = ops::split_heads(w.v(normed), w.heads);
  auto attn = ops::scaled_dot_attention(q, k, v);
  auto mixed = w.proj(ops::merge_heads(attn.output));
  if (dropout > 0.0) {
    mixed = ops::dropout(mixed, dropout, *rng);
  }
  auto h = ops::add(x, mixed);
  auto mlp = w.fc2(ops::gelu(w.fc1(w.norm2(h))));
  if (dropout > 0.0) {
    mlp = ops::dropout(mlp, dropout, *rng);
  }
  return {ops::add(h, mlp), std::move(attn.map), std::move(k), std::move(v)};
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3)) {
    throw ShapeError("patchify: expects square (B, C, H, H) images, got " +
                     shape_str(images.shape()));
  }
  const std::size_t batch = images.dim(0);
  const std::size_t channels = images.dim(1);
  const std::size_t size = images.dim(2);
  if (patch == 0 || size % patch != 0) {
    throw ShapeError("patchify: image size " + std::to_string(size) +
                     " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t grid = size / patch;
  const std::size_t width = channels * patch * patch;
  std::vector<T> rows(batch * grid * grid * width);
  const auto src = images.values();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t gy = 0; gy < grid; ++gy) {
      for (std::size_t gx = 0; gx < grid; ++gx) {
        T* dst = rows.data() + ((b * grid + gy) * grid + gx) * width;
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t py = 0; py < patch; ++py) {
            const T* line =
                src.data() + ((b * channels + c) * size + gy * patch + py) * size + gx * patch;
            std::copy_n(line, patch, dst + (c * patch + py) * patch);
          }
        }
      }
    }
  }
  return Tensor<T>(Shape{batch, grid * grid, width}, std::move(rows), false);
}

template <typename T>
Tensor<T> embed_patches(const Tensor<T>& images, std::size_t patch, const Linear<T>& projection,
                        const Tensor<T>& cls_token, const Tensor<T>& pos_embed) {
  const auto tokens = projection(patchify(images, patch));
  const std::size_t batch = tokens.dim(0);
  const std::size_t dim = tokens.dim(2);
  auto cls = ops::expand_batch(ops::reshape(cls_token, Shape{1, dim}), batch);
  auto seq = ops::concat_tokens(cls, tokens);
  if (pos_embed.numel() != seq.dim(1) * dim) {
    throw ShapeError("embed_patches: positional embedding " + shape_str(pos_embed.shape()) +
                     " does not match " + std::to_string(seq.dim(1)) + " tokens of width " +
                     std::to_string(dim));
  }
  return ops::add(seq, pos_embed);
}

#define FPT_INSTANTIATE_LAYERS(T)                                                                \
  template Tensor<T> normal_tensor<T>(Shape, double, Rng&, bool);                                \
  template struct Linear<T>;                                                                     \
  template struct LayerNormParams<T>;                                                            \
  template struct BlockWeights<T>;                                                               \
  template BlockTrace<T> block_forward(const BlockWeights<T>&, const Tensor<T>&, double, Rng*);  \
  template Tensor<T> patchify(const Tensor<T>&, std::size_t);                                    \
  template Tensor<T> embed_patches(const Tensor<T>&, std::size_t, const Linear<T>&,              \
                                   const Tensor<T>&, const Tensor<T>&);

FPT_INSTANTIATE_LAYERS(float)
FPT_INSTANTIATE_LAYERS(double)

#undef FPT_INSTANTIATE_LAYERS

}  // namespace fpt

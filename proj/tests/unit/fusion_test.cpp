// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "fpt/errors.hpp"
#include "fpt/fusion.hpp"
#include "fpt/gradcheck.hpp"
#include "fpt/selftest.hpp"
#include "oracles.hpp"

using namespace fpt;

namespace {

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

SideDims small_dims(std::size_t prompts) {
  SideDims d;
  d.image_size = 16;
  d.patch = 8;
  d.dim = 4;
  d.heads = 2;
  d.layers = 2;
  d.mlp_ratio = 2;
  d.num_prompts = prompts;
  d.num_classes = 3;
  d.backbone_dim = 6;
  d.backbone_heads = 2;
  return d;
}

// Per-head (count, dh) slice of a (B, h, count, dh) tensor, as token-major
// (count, h*dh) rows for the multi-head oracle.
oracle::Vec token_major(const Tensor<double>& t, std::size_t b) {
  const std::size_t h = t.dim(1), n = t.dim(2), dh = t.dim(3);
  oracle::Vec out(n * h * dh);
  for (std::size_t hh = 0; hh < h; ++hh) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < dh; ++c) out[i * h * dh + hh * dh + c] = t[((b * h + hh) * n + i) * dh + c];
    }
  }
  return out;
}

}  // namespace

TEST(Ffm, MatchesHandOracle) {
  Rng rng(21);
  const std::size_t B = 2, N = 3, d_s = 4, P = 2, heads = 2, dh = 3, S = 5;
  auto z = normal_tensor<double>(Shape{B, N, d_s}, 1.0, rng, false);
  auto prompts = normal_tensor<double>(Shape{P, d_s}, 1.0, rng, false);
  FusionWeights<double> w{Linear<double>::xavier(d_s, heads * dh, rng, false),
                          Linear<double>::xavier(heads * dh, d_s, rng, false)};
  for (auto& v : w.f_out.bias.mutable_values()) v = rng.normal();
  const auto feats = random_features(1, B, heads, S, dh, rng);
  const auto out = ffm_forward(z, feats, prompts, w, 1);
  ASSERT_EQ(out.sequence.shape(), (Shape{B, N + P, d_s}));
  ASSERT_EQ(out.cross_map.shape(), (Shape{B, heads, P, S}));

  const auto pv = oracle::to_vec(prompts.values());
  const auto q = oracle::linear_of(w.f_in, pv, P);
  for (std::size_t b = 0; b < B; ++b) {
    const auto merged = oracle::multi_head(q, token_major(feats.keys, b), token_major(feats.values, b),
                                           P, S, heads, dh);
    auto rows = oracle::linear_of(w.f_out, merged, P);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] += pv[i];
    for (std::size_t i = 0; i < N * d_s; ++i) EXPECT_EQ(out.sequence[b * (N + P) * d_s + i], z[b * N * d_s + i]);
    for (std::size_t i = 0; i < P * d_s; ++i) {
      EXPECT_NEAR(out.sequence[(b * (N + P) + N) * d_s + i], rows[i], 1e-12);
    }
  }
}

TEST(Ffm, ZeroPromptsReturnsSideTokens) {
  Rng rng(22);
  auto z = normal_tensor<double>(Shape{1, 3, 4}, 1.0, rng, false);
  Tensor<double> prompts(Shape{0, 4});
  FusionWeights<double> w{Linear<double>::xavier(4, 6, rng, false), Linear<double>::zeros(6, 4, false)};
  const auto out = ffm_forward(z, random_features(0, 1, 2, 2, 3, rng), prompts, w, 0);
  EXPECT_TRUE(out.sequence.same_storage(z));
  EXPECT_FALSE(out.cross_map.defined());
}

TEST(Ffm, LayerMismatchIsLookupError) {
  Rng rng(23);
  auto z = normal_tensor<double>(Shape{1, 3, 4}, 1.0, rng, false);
  auto prompts = normal_tensor<double>(Shape{2, 4}, 1.0, rng, false);
  FusionWeights<double> w{Linear<double>::xavier(4, 6, rng, false), Linear<double>::zeros(6, 4, false)};
  EXPECT_THROW(ffm_forward(z, random_features(1, 1, 2, 2, 3, rng), prompts, w, 0), LookupError);
}

TEST(SideNetwork, FreshFusionLeavesPromptsUnchanged) {
  const auto net = SideNetwork<double>::create(small_dims(3), 5);
  Rng rng(24);
  auto z = normal_tensor<double>(Shape{1, 5, 4}, 1.0, rng, false);
  const auto out = ffm_forward(z, random_features(0, 1, 2, 4, 3, rng), net.prompts_for(0), net.fusion[0], 0);
  for (std::size_t i = 0; i < 3 * 4; ++i) EXPECT_EQ(out.sequence[5 * 4 + i], net.prompts_for(0)[i]);
}

TEST(SideNetwork, ZeroPromptsIsPlainTransformer) {
  const auto net = SideNetwork<double>::create(small_dims(0), 6);
  Rng rng(25);
  const auto images = normal_tensor<double>(Shape{1, 3, 16, 16}, 1.0, rng, false);
  std::vector<LayerFusionFeatures<double>> feats{random_features(0, 1, 2, 3, 3, rng),
                                                 random_features(1, 1, 2, 3, 3, rng)};
  const auto logits = side_forward<double>(images, feats, net);

  const auto z0 = embed_patches(images, 8, net.patch_embed, net.cls_token, net.pos_embed);
  auto z = oracle::to_vec(z0.values());
  for (const auto& blk : net.blocks) z = oracle::block(blk, z, 5);
  const auto normed = oracle::norm_of(net.final_norm, z, 5);
  const auto want = oracle::linear_of(net.head, oracle::Vec(normed.begin(), normed.begin() + 4), 1);
  EXPECT_LT(oracle::max_abs_diff(oracle::to_vec(logits.values()), want), 1e-10);
}

TEST(SideNetwork, SequenceLengthConstantAcrossLayers) {
  for (std::size_t P : {0u, 1u, 4u, 9u}) {
    const auto net = SideNetwork<double>::create(small_dims(P), 7);
    Rng rng(26);
    const auto images = normal_tensor<double>(Shape{2, 3, 16, 16}, 1.0, rng, false);
    std::vector<LayerFusionFeatures<double>> feats{random_features(0, 2, 2, 3, 3, rng),
                                                   random_features(1, 2, 2, 3, 3, rng)};
    std::vector<SideLayerTrace> trace;
    const auto logits = side_forward<double>(images, feats, net, nullptr, &trace);
    EXPECT_EQ(logits.shape(), (Shape{2, 3}));
    for (const auto& t : trace) {
      EXPECT_EQ(t.input_tokens, 5u);
      EXPECT_EQ(t.output_tokens, 5u);
      EXPECT_EQ(t.fused_tokens, 5u + P);
      if (P > 0) EXPECT_EQ(t.cross_map_shape, (Shape{2, 2, P, 3}));
    }
  }
}

TEST(SideNetwork, ParameterNamesAndSharing) {
  auto dims = small_dims(2);
  const auto net = SideNetwork<float>::create(dims, 1);
  std::set<std::string> prefixes;
  for (const auto& t : net.named_parameters()) {
    EXPECT_TRUE(t.tensor.requires_grad()) << t.name;
    prefixes.insert(t.name.substr(0, t.name.find('.')));
  }
  EXPECT_EQ(prefixes, (std::set<std::string>{"side", "prompts", "fusion", "head"}));
  EXPECT_EQ(net.prompts.size(), 2u);
  dims.shared_prompts = true;
  const auto shared = SideNetwork<float>::create(dims, 1);
  EXPECT_EQ(shared.prompts.size(), 1u);
  EXPECT_TRUE(shared.prompts_for(0).same_storage(shared.prompts_for(1)));
  dims.fusion = false;
  EXPECT_FALSE(SideNetwork<float>::create(dims, 1).has_fusion());
}

TEST(SideNetwork, SeedDeterminesWeights) {
  const auto a = SideNetwork<float>::create(small_dims(2), 3);
  const auto b = SideNetwork<float>::create(small_dims(2), 3);
  const auto c = SideNetwork<float>::create(small_dims(2), 4);
  EXPECT_EQ(a.blocks[0].q.weight[5], b.blocks[0].q.weight[5]);
  EXPECT_NE(a.blocks[0].q.weight[5], c.blocks[0].q.weight[5]);
}

TEST(Checkpoint, RoundTripRestoresLearnables) {
  const auto cfg = tiny_config();
  auto net = SideNetwork<float>::create(SideDims::from_config(cfg, TrainMode::fpt), 1);
  net.prompts[0].mutable_values()[3] = 42.0f;
  const auto path = std::filesystem::temp_directory_path() / "fpt_ckpt_test.fptk";
  save_checkpoint(path, nlohmann::json{{"note", "x"}}, 0xABCDu, net);
  auto other = SideNetwork<float>::create(SideDims::from_config(cfg, TrainMode::fpt), 2);
  const auto header = load_checkpoint(path, other);
  EXPECT_EQ(header.at("config").at("note"), "x");
  const auto a = net.named_parameters();
  const auto b = other.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].name, b[i].name);
    for (std::size_t j = 0; j < a[i].tensor.numel(); ++j) EXPECT_EQ(a[i].tensor[j], b[i].tensor[j]);
  }
  std::filesystem::remove(path);
}

class FusionGrad : public ::testing::TestWithParam<int> {};

TEST_P(FusionGrad, FfmPromptsAndMaps) {
  Rng rng(static_cast<std::uint64_t>(GetParam()) + 700);
  auto z = normal_tensor<double>(Shape{2, 3, 4}, 1.0, rng, true);
  auto prompts = normal_tensor<double>(Shape{2, 4}, 1.0, rng, true);
  FusionWeights<double> w{Linear<double>::xavier(4, 6, rng, true), Linear<double>::xavier(6, 4, rng, true)};
  const auto feats = random_features(0, 2, 2, 5, 3, rng);
  auto r = normal_tensor<double>(Shape{2, 5, 4}, 1.0, rng, false);
  auto f = [&] { return ops::sum(ops::mul(ffm_forward(z, feats, prompts, w, 0).sequence, r)); };
  EXPECT_LT(finite_diff_check(f, z), 1e-5);
  EXPECT_LT(finite_diff_check(f, prompts), 1e-5);
  EXPECT_LT(finite_diff_check(f, w.f_in.weight), 1e-5);
  EXPECT_LT(finite_diff_check(f, w.f_out.weight), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Seeds, FusionGrad, ::testing::Range(0, 5));

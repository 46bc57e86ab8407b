// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <vector>

#include "grad_cases.hpp"
#include "ilens/grad_check.hpp"
#include "ilens/zoo.hpp"

using namespace ilens;

namespace {

ModelConfig vit_config() {
  ModelConfig c;
  c.kind = ModelKind::tiny_vit;
  c.input = {1, 16, 16};
  c.vit = {4, 32, 4, 4, 2.0};
  c.num_classes = 3;
  return c;
}

ModelConfig mlp_config() {
  ModelConfig c;
  c.kind = ModelKind::mlp;
  c.input = {1, 16, 16};
  c.mlp_widths = {64, 64};
  c.num_classes = 3;
  return c;
}

template <class T>
Tensor<T> random_images(std::size_t n, const ImageShape& s, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<T> v(n * s.numel());
  for (auto& x : v) x = static_cast<T>(rng.uniform());
  return Tensor<T>({n, s.channels, s.height, s.width}, std::move(v));
}

}  // namespace

TEST(BuildModel, TinyVitStructure) {
  const auto m = build_model<float>(vit_config(), Rng(1));
  EXPECT_EQ(m.layer_count(), 4u);
  EXPECT_EQ(m.config().token_count(), 17u);
  EXPECT_EQ(m.param("pos_embed").shape(), (Shape{17, 32}));
  EXPECT_TRUE(m.has_param("blocks.3.mlp.fc2.w"));
  EXPECT_FALSE(m.has_param("blocks.4.mlp.fc2.w"));
}

TEST(BuildModel, MlpStructure) {
  const auto m = build_model<float>(mlp_config(), Rng(1));
  EXPECT_EQ(m.layer_count(), 2u);
  EXPECT_EQ(m.param("head.w").shape(), (Shape{64, 3}));
}

TEST(BuildModel, GoldenParameterCounts) {
  // tiny_vit: embed 16*32+32, cls 32, pos 17*32, per block 8544, final norm 64, head 32*3+3.
  EXPECT_EQ(build_model<float>(vit_config(), Rng(1)).parameter_count(), 35459u);
  // mlp: 256*64+64, 64*64+64, 64*3+3.
  EXPECT_EQ(build_model<float>(mlp_config(), Rng(1)).parameter_count(), 20803u);
  auto recon = vit_config();
  recon.head = HeadKind::reconstruction;
  // Decoder replaces the classifier: 32*16+16.
  EXPECT_EQ(build_model<float>(recon, Rng(1)).parameter_count(), 35459u - 99u + 528u);
}

TEST(BuildModel, ParametersArePureFunctionOfConfigAndSeed) {
  const auto a = build_model<float>(vit_config(), Rng(5));
  const auto b = build_model<float>(vit_config(), Rng(5));
  const auto c = build_model<float>(vit_config(), Rng(6));
  ASSERT_EQ(a.params().size(), b.params().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    EXPECT_EQ(a.params()[i].name, b.params()[i].name);
    EXPECT_EQ(a.params()[i].value.values(), b.params()[i].value.values());
    any_diff = any_diff || a.params()[i].value.values() != c.params()[i].value.values();
  }
  EXPECT_TRUE(any_diff);
}

TEST(BuildModel, ConfigErrors) {
  auto bad_patch = vit_config();
  bad_patch.vit.patch_size = 5;
  EXPECT_THROW(build_model<float>(bad_patch, Rng(1)), ConfigError);
  auto bad_heads = vit_config();
  bad_heads.vit.num_heads = 5;
  EXPECT_THROW(build_model<float>(bad_heads, Rng(1)), ConfigError);
  auto mlp_recon = mlp_config();
  mlp_recon.head = HeadKind::reconstruction;
  EXPECT_THROW(build_model<float>(mlp_recon, Rng(1)), UnsupportedError);
}

TEST(ForwardWithTaps, RowsPerSampleAndHead) {
  const auto m = build_model<float>(vit_config(), Rng(2));
  const auto x = random_images<float>(5, m.config().input, 3);
  const std::vector<int> layers{0, 2};
  const auto out = m.forward_with_taps(x, layers);
  ASSERT_EQ(out.taps.size(), 2u);
  EXPECT_EQ(out.taps.at(2).matrix.shape(), (Shape{5, 17 * 32}));
  EXPECT_EQ(out.head.shape(), (Shape{5, 3}));

  const auto none = m.forward_with_taps(x, std::vector<int>{});
  EXPECT_TRUE(none.taps.empty());
  EXPECT_EQ(none.head.values(), out.head.values());
}

TEST(ForwardWithTaps, ProtocolBatchOf500) {
  const auto m = build_model<float>(mlp_config(), Rng(2));
  const auto out = m.forward_with_taps(random_images<float>(500, m.config().input, 4), {1});
  EXPECT_EQ(out.taps.at(1).matrix.dim(0), 500u);
}

TEST(ForwardWithTaps, DuplicatedRowsGiveIdenticalRepresentations) {
  const auto m = build_model<float>(vit_config(), Rng(2));
  const auto one = random_images<float>(1, m.config().input, 5);
  std::vector<float> twice(one.data().begin(), one.data().end());
  twice.insert(twice.end(), one.data().begin(), one.data().end());
  const Tensor<float> x({2, 1, 16, 16}, twice);
  const auto rep = m.forward_with_taps(x, {3}).taps.at(3).matrix;
  const std::size_t d = rep.dim(1);
  for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(rep[j], rep[d + j]);
}

TEST(ForwardWithTaps, RowsDoNotDependOnBatchComposition) {
  const auto m = build_model<float>(vit_config(), Rng(2));
  const auto x = random_images<float>(4, m.config().input, 6);
  const auto full = m.representation(x, 2);
  const Tensor<float> first({1, 1, 16, 16}, std::vector<float>(x.data().begin(), x.data().begin() + 256));
  const auto alone = m.representation(first, 2);
  for (std::size_t j = 0; j < alone.numel(); ++j) EXPECT_EQ(alone[j], full[j]);
}

TEST(ForwardWithTaps, OutOfRangeLayer) {
  const auto m = build_model<float>(vit_config(), Rng(2));
  const auto x = random_images<float>(2, m.config().input, 7);
  EXPECT_THROW(m.forward_with_taps(x, {4}), IndexError);
  EXPECT_THROW(m.forward_with_taps(x, {-1}), IndexError);
}

TEST(ForwardWithTaps, TapFeedsNextBlock) {
  const auto m = build_model<double>(vit_config(), Rng(3));
  const auto x = random_images<double>(3, m.config().input, 8);
  const std::vector<int> all{0, 1, 2, 3};
  const auto out = m.forward_with_taps(x, all);
  for (int i = 0; i + 1 < 4; ++i) {
    const auto h = m.block_output(x, i);
    EXPECT_EQ(m.tap(h).values(), out.taps.at(i).matrix.values());
    const auto next = m.tap(m.apply_block(h, i + 1));
    EXPECT_EQ(next.values(), out.taps.at(i + 1).matrix.values());
  }
}

TEST(ForwardWithTaps, MeanTokenAggregation) {
  auto c = vit_config();
  c.taps = TapAggregation::mean_tokens;
  const auto m = build_model<float>(c, Rng(3));
  EXPECT_EQ(m.representation(random_images<float>(2, c.input, 9), 1).shape(), (Shape{2, 32}));
}

TEST(Decoder, ShapeRangeAndDegenerateInput) {
  const auto dec = build_decoder<float>(vit_config(), Rng(4));
  const auto tokens = Tensor<float>::zeros({2, 17, 32});
  const auto img = dec.forward(tokens);
  EXPECT_EQ(img.shape(), (Shape{2, 1, 16, 16}));
  for (float v : img.data()) EXPECT_EQ(v, 0.5f);  // sigmoid of the zero bias

  Rng rng(5);
  std::vector<float> big(2 * 17 * 32);
  for (auto& v : big) v = static_cast<float>(rng.normal(0, 10));
  const auto decoded = dec.forward(Tensor<float>({2, 17, 32}, big));
  for (float v : decoded.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(build_decoder<float>(mlp_config(), Rng(4)), UnsupportedError);
}

TEST(Rehead, KeepsEncoderAndReplacesHead) {
  const auto pt = build_model<float>(vit_config(), Rng(6));
  auto target = vit_config();
  target.num_classes = 5;
  const auto ft = rehead(pt, target, Rng(7));
  EXPECT_EQ(ft.param("blocks.2.attn.q.w").values(), pt.param("blocks.2.attn.q.w").values());
  EXPECT_EQ(ft.param("head.w").shape(), (Shape{32, 5}));
  auto recon = vit_config();
  recon.head = HeadKind::reconstruction;
  EXPECT_TRUE(rehead(pt, recon, Rng(7)).has_param("decoder.w"));
  auto other = vit_config();
  other.vit.depth = 3;
  EXPECT_THROW(rehead(pt, other, Rng(7)), ConfigError);
}

// Gradient integrity of both model families at 64-bit, w.r.t. input and
// every parameter tensor.
TEST(ModelGradients, BothFamiliesPassGradCheck) {
  for (const auto& [name, err] : grad_cases::model_errors()) EXPECT_LT(err, 1e-4) << name;
}

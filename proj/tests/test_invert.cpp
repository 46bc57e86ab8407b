// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <vector>

#include "ilens/data.hpp"
#include "ilens/invert.hpp"
#include "ilens/train.hpp"
#include "oracles.hpp"

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

ModelConfig linear_config() {
  ModelConfig c;
  c.kind = ModelKind::mlp;
  c.input = {1, 4, 4};
  c.mlp_widths = {24};
  c.mlp_activation = Activation::identity;
  c.num_classes = 3;
  return c;
}

const Model<float>& trained_vit() {
  static const Model<float> model = [] {
    const auto tr = gen_shapes(600, 3, {1, 16, 16}, Rng(11));
    const auto te = gen_shapes(60, 3, {1, 16, 16}, Rng(12), 0, Split::test);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.optimizer = OptimizerKind::adam;
    cfg.seed = 3;
    return train(build_model<float>(vit_config(), Rng(3)), tr, te, cfg).model.frozen();
  }();
  return model;
}

Tensor<float> probe_images(std::size_t n, std::uint64_t seed) {
  return gen_shapes(n, 3, {1, 16, 16}, Rng(seed), 0, Split::test).images;
}

}  // namespace

TEST(Invert, ZeroIterationsReturnsInitialization) {
  const auto model = build_model<float>(vit_config(), Rng(1));
  const auto x = probe_images(6, 4);
  InversionConfig cfg;
  cfg.iterations = 0;
  const auto res = invert(model, 1, x, cfg, Rng(9));
  ASSERT_EQ(res.x_prime.shape(), x.shape());
  const std::size_t per = x.numel() / 6;
  for (std::size_t i = 0; i < 6; ++i) {
    Rng r = Rng(9).derive(i);
    for (std::size_t p = 0; p < per; ++p) EXPECT_EQ(res.x_prime[i * per + p], static_cast<float>(r.uniform()));
  }
  EXPECT_EQ(res.init_loss, res.per_sample_loss);

  cfg.init = InversionInit::data_jitter;
  cfg.jitter_sigma = 0;
  EXPECT_EQ(invert(model, 1, x, cfg, Rng(9)).x_prime.values(), x.values());
}

TEST(Invert, LinearInjectiveLayerMatchesLeastSquares) {
  const auto model = build_model<double>(linear_config(), Rng(21));
  const auto& w = model.param("layers.0.w");  // [16 x 24]
  const std::size_t din = 16, dout = 24, n = 5;
  Rng rx(22);
  std::vector<double> xv(n * din);
  for (auto& v : xv) v = 0.1 + 0.8 * rx.uniform();
  const Tensor<double> x({n, 1, 4, 4}, xv);

  InversionConfig cfg;
  cfg.iterations = 3000;
  cfg.step_size = 0.01;
  const auto res = invert(model, 0, x, cfg, Rng(23));

  // Representation is x W + b, so the system matrix is W^T.
  oracle::Matrix a(dout, std::vector<double>(din));
  for (std::size_t r = 0; r < dout; ++r)
    for (std::size_t c = 0; c < din; ++c) a[r][c] = w[c * dout + r];
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> target(dout, 0.0);
    for (std::size_t r = 0; r < dout; ++r)
      for (std::size_t c = 0; c < din; ++c) target[r] += a[r][c] * xv[i * din + c];
    const auto expected = oracle::least_squares(a, target);
    EXPECT_LT(res.per_sample_loss[i], 1e-4);
    EXPECT_TRUE(res.converged[i]);
    for (std::size_t c = 0; c < din; ++c) EXPECT_NEAR(res.x_prime[i * din + c], expected[c], 1e-2);
  }
}

TEST(Invert, TrainedVitLossImprovesPerSample) {
  const auto& model = trained_vit();
  const auto x = probe_images(32, 31);
  const auto res = invert(model, 3, x, InversionConfig{}, Rng(32));
  ASSERT_EQ(res.per_sample_loss.size(), 32u);
  std::size_t improved = 0;
  for (std::size_t i = 0; i < 32; ++i) improved += res.per_sample_loss[i] < res.init_loss[i];
  EXPECT_GE(improved, 31u);  // >= 95% of 32
}

TEST(Invert, MeanLossNeverWorsensAcrossLayers) {
  const auto& model = trained_vit();
  const auto x = probe_images(16, 41);
  InversionConfig cfg;
  cfg.iterations = 20;
  for (int layer = 0; layer < 4; ++layer) {
    const auto res = invert(model, layer, x, cfg, Rng(42));
    EXPECT_LE(InversionResult<float>::mean(res.per_sample_loss), InversionResult<float>::mean(res.init_loss))
        << "layer " << layer;
  }
}

TEST(Invert, ParametersUntouchedAndPixelsClamped) {
  const auto model = build_model<float>(vit_config(), Rng(1));
  std::vector<std::vector<float>> before;
  for (const auto& p : model.params()) before.push_back(p.value.values());
  InversionConfig cfg;
  cfg.iterations = 10;
  cfg.step_size = 0.5;
  const auto res = invert(model, 2, probe_images(8, 5), cfg, Rng(2));
  for (std::size_t k = 0; k < before.size(); ++k) {
    EXPECT_EQ(model.params()[k].value.values(), before[k]);
    EXPECT_FALSE(model.params()[k].value.has_grad());
  }
  for (float v : res.x_prime.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Invert, ResultIndependentOfChunkingAndJobs) {
  const auto model = build_model<float>(vit_config(), Rng(1));
  const auto x = probe_images(10, 6);
  InversionConfig cfg;
  cfg.iterations = 5;
  const auto a = invert(model, 1, x, cfg, Rng(3));
  cfg.chunk_size = 3;
  const auto b = invert(model, 1, x, cfg, Rng(3), 4);
  EXPECT_EQ(a.x_prime.values(), b.x_prime.values());
  EXPECT_EQ(a.per_sample_loss, b.per_sample_loss);
}

TEST(Invert, Contracts) {
  const auto model = build_model<float>(vit_config(), Rng(1));
  const auto x = probe_images(3, 6);
  EXPECT_THROW(invert(model, 4, x, InversionConfig{}, Rng(1)), IndexError);
  EXPECT_THROW(invert(model, -1, x, InversionConfig{}, Rng(1)), IndexError);
  InversionConfig bad;
  bad.step_size = 0;
  EXPECT_THROW(invert(model, 0, x, bad, Rng(1)), ConfigError);
}

TEST(Invert, NonFiniteLossNamesSample) {
  auto model = build_model<float>(vit_config(), Rng(1)).clone();
  model.param("patch_embed.w").mutable_data()[0] = std::numeric_limits<float>::infinity();
  try {
    invert(model, 0, probe_images(3, 6), InversionConfig{}, Rng(1));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("inversion diverged at sample 0"), std::string::npos) << e.what();
  }
}

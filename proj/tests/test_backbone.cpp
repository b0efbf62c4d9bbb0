// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "m2hx/backbone.hpp"
#include "m2hx/gradcheck.hpp"
#include "test_util.hpp"

using namespace m2hx;
using testutil::bitwise_equal;
using testutil::max_abs_diff;
using Td = Tensor<double>;

namespace {

BackboneConfig toy_cfg() {
  BackboneConfig cfg;
  cfg.image_size = 32;
  cfg.patch_size = 8;
  cfg.embed_dim = 16;
  cfg.num_blocks = 4;
  cfg.num_heads = 2;
  cfg.num_registers = 4;
  cfg.tap_layers = {1, 2, 3, 4};
  cfg.lora_rank = 2;
  cfg.lora_blocks = 2;
  cfg.lora_dropout = 0.0;
  return cfg;
}

}  // namespace

TEST(LoraLinear, ZeroBEqualsFrozenBaseline) {
  ParamRegistry<double> reg(5);
  LoraLinear<double> layer(reg, "l", 6, 4, 3, 2.0, 0.0);
  Rng rng(9);
  Td x = randn<double>({5, 6}, rng);
  Td with_lora = layer.forward(x);
  Td base = linear(x, layer.w, layer.b);
  EXPECT_TRUE(bitwise_equal(with_lora, base));
}

TEST(LoraLinear, DirectArithmetic) {
  // W = 0, alpha = 2, A = [[1]], B = [[1]], x = [3] -> [6]
  ParamRegistry<double> reg(1);
  LoraLinear<double> layer(reg, "l", 1, 1, 1, 2.0, 0.0);
  layer.w.ptr()[0] = 0.0;
  layer.a_mat.ptr()[0] = 1.0;
  layer.b_mat.ptr()[0] = 1.0;
  Td x = Td::from({1, 1}, {3.0});
  EXPECT_DOUBLE_EQ(layer.forward(x).scalar(), 6.0);
}

TEST(LoraLinear, GradFlowsToABOnlyAndPassesGradCheck) {
  ParamRegistry<double> reg(7);
  LoraLinear<double> layer(reg, "l", 5, 4, 2, 1.5, 0.0);
  Rng rng(13);
  // make B nonzero so both factors carry signal
  for (int64_t i = 0; i < layer.b_mat.numel(); ++i) layer.b_mat.ptr()[i] = 0.05 * (double)(i + 1);
  Td x = randn<double>({3, 5}, rng);
  Td proj = randn<double>({3, 4}, rng);

  {
    Tape<double> tape;
    Td loss = dot(layer.forward(x), proj);
    tape.backward(loss);
  }
  // frozen W never receives gradient: its grad slot stays unsized
  EXPECT_FALSE(layer.w.requires_grad);
  EXPECT_TRUE(layer.w.grad->empty());
  double asum = 0, bsum = 0;
  for (auto g : *layer.a_mat.grad) asum += std::abs(g);
  for (auto g : *layer.b_mat.grad) bsum += std::abs(g);
  EXPECT_GT(asum, 0.0);
  EXPECT_GT(bsum, 0.0);

  layer.a_mat.zero_grad();
  auto fa = [&](Td& t) {
    LoraLinear<double> probe = layer;
    probe.a_mat = t;
    return dot(probe.forward(x), proj);
  };
  EXPECT_LE(grad_check<double>(fa, layer.a_mat), 1e-5);
  auto fb = [&](Td& t) {
    LoraLinear<double> probe = layer;
    probe.b_mat = t;
    return dot(probe.forward(x), proj);
  };
  EXPECT_LE(grad_check<double>(fb, layer.b_mat), 1e-5);
}

TEST(PatchEmbed, TokenAndSequenceCounts) {
  ParamRegistry<double> reg(11);
  BackboneConfig cfg = toy_cfg();
  Backbone<double> bb(reg, cfg);
  // 32/8 = 4 per side -> 16 patch tokens, +4 registers -> 20
  EXPECT_EQ(cfg.num_patches(), 16);
  Rng rng(15);
  Td img = randn<double>({3, 32, 32}, rng);
  Td seq = bb.embed(img);
  EXPECT_EQ(seq.shape, (Shape{20, 16}));
}

TEST(PatchEmbed, ZeroImageGivesPositionalEmbeddings) {
  ParamRegistry<double> reg(17);
  Backbone<double> bb(reg, toy_cfg());
  Td img = Td::zeros({3, 32, 32});
  Td seq = bb.embed(img);
  // patch projection bias is zero-initialized, so patch tokens equal pos emb
  Td patches = slice_rows(seq, 0, 16);
  EXPECT_TRUE(bitwise_equal(patches, bb.pos_embed));
  // register tokens receive no positional embedding
  Td regs = slice_rows(seq, 16, 20);
  EXPECT_TRUE(bitwise_equal(regs, bb.registers));
}

TEST(BackboneForward, TapsAndRegistersInterface) {
  ParamRegistry<double> reg(19);
  BackboneConfig cfg = toy_cfg();
  Backbone<double> bb(reg, cfg);
  Rng rng(21);
  Td img = randn<double>({3, 32, 32}, rng);
  BackboneOutput<double> out = bb.forward(img);
  EXPECT_EQ(out.taps.size(), 4u);
  for (int t : cfg.tap_layers) {
    ASSERT_TRUE(out.taps.count(t));
    EXPECT_EQ(out.taps[t].shape, (Shape{16, 16}));
  }
  EXPECT_EQ(out.registers.shape, (Shape{4, 16}));
}

TEST(BackboneForward, DeterministicWithDropoutOff) {
  ParamRegistry<double> reg(23);
  Backbone<double> bb(reg, toy_cfg());
  Rng rng(25);
  Td img = randn<double>({3, 32, 32}, rng);
  BackboneOutput<double> a = bb.forward(img);
  BackboneOutput<double> b = bb.forward(img);
  for (auto& [k, v] : a.taps) EXPECT_TRUE(bitwise_equal(v, b.taps[k]));
  EXPECT_TRUE(bitwise_equal(a.registers, b.registers));
}

TEST(BackboneForward, ZeroBMatchesLoraFreeBackboneBitwise) {
  BackboneConfig with = toy_cfg();
  BackboneConfig without = toy_cfg();
  without.lora_blocks = 0;
  without.lora_rank = 0;
  // same seed => identical frozen weights; lora A/B draws come after all
  // frozen draws of a block... construct separately and compare outputs
  ParamRegistry<double> r1(29), r2(29);
  Backbone<double> bb_with(r1, with);
  Backbone<double> bb_without(r2, without);
  // LoRA A draws perturb the RNG stream, so align frozen weights explicitly
  for (const auto& e : r2.entries()) {
    const auto& src = r1.find(e.name);
    std::copy(src.tensor.ptr(), src.tensor.ptr() + src.tensor.numel(),
              e.tensor.data->data());
  }
  Rng rng(31);
  Td img = randn<double>({3, 32, 32}, rng);
  BackboneOutput<double> a = bb_with.forward(img);   // B zero-initialized
  BackboneOutput<double> b = bb_without.forward(img);
  for (auto& [k, v] : a.taps) EXPECT_TRUE(bitwise_equal(v, b.taps[k]));
  EXPECT_TRUE(bitwise_equal(a.registers, b.registers));
}

TEST(BackboneForward, DropoutIsStochasticOnlyInTrainingMode) {
  BackboneConfig cfg = toy_cfg();
  cfg.lora_dropout = 0.5;
  ParamRegistry<double> reg(37);
  Backbone<double> bb(reg, cfg);
  // give B nonzero values so the dropout branch affects the output
  for (auto& e : reg.entries())
    if (e.name.find(".lora.b") != std::string::npos)
      for (int64_t i = 0; i < e.tensor.numel(); ++i) e.tensor.ptr()[i] = 0.1;
  Rng rng(39);
  Td img = randn<double>({3, 32, 32}, rng);
  Rng drop_rng(41);
  RunCtx train_ctx{true, &drop_rng};
  BackboneOutput<double> a = bb.forward(img, train_ctx);
  BackboneOutput<double> b = bb.forward(img, train_ctx);
  EXPECT_FALSE(bitwise_equal(a.taps[4], b.taps[4]));
  // deterministic mode: no rng attached
  BackboneOutput<double> c = bb.forward(img);
  BackboneOutput<double> d = bb.forward(img);
  EXPECT_TRUE(bitwise_equal(c.taps[4], d.taps[4]));
}

TEST(LoraParamCount, FormulaAndDegenerateRank) {
  // one projection d_in = d_out = 8, r = 2 -> 32
  EXPECT_EQ(2 * (8 + 8), 32);
  BackboneConfig cfg = toy_cfg();
  cfg.lora_rank = 0;
  EXPECT_EQ(lora_param_count(cfg), 0);
}

TEST(LoraParamCount, MatchesTrainableEnumeration) {
  ParamRegistry<double> reg(43);
  BackboneConfig cfg = toy_cfg();
  Backbone<double> bb(reg, cfg);
  int64_t enumerated = 0;
  for (const auto& e : reg.entries())
    if (e.name.find(".lora.") != std::string::npos) {
      EXPECT_TRUE(e.trainable);
      enumerated += e.tensor.numel();
    } else {
      EXPECT_FALSE(e.trainable);  // everything else in the backbone is frozen
    }
  EXPECT_EQ(enumerated, lora_param_count(cfg));
}

// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "m2hx/gradcheck.hpp"
#include "m2hx/heads.hpp"
#include "test_util.hpp"

using namespace m2hx;
using testutil::bitwise_equal;
using Td = Tensor<double>;

TEST(DepthBins, UniformWidthsFromZeroLogits) {
  // zero logits, N_b = 4, d_min = 0.1, d_max = 8.1
  ParamRegistry<double> reg(3);
  DepthHead<double> head(reg, "d", 6, {4, 0.1, 8.1});
  std::fill(head.ww_w.data->begin(), head.ww_w.data->end(), 0.0);
  Td h = Td::zeros({6, 4, 4});
  DepthHeadOut<double> out = head.forward(h, 8, 8);
  const double we[] = {2.1, 4.1, 6.1, 8.1};
  const double wc[] = {1.1, 3.1, 5.1, 7.1};
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(out.widths.ptr()[i], 0.25, 1e-12);
    EXPECT_NEAR(out.edges.ptr()[i], we[i], 1e-12);
    EXPECT_NEAR(out.centers.ptr()[i], wc[i], 1e-12);
  }
}

TEST(DepthBins, OneHotProbabilityPicksCenter) {
  ParamRegistry<double> reg(5);
  DepthHead<double> head(reg, "d", 4, {4, 0.1, 8.1});
  std::fill(head.ww_w.data->begin(), head.ww_w.data->end(), 0.0);
  // huge logit on bin 2 at every pixel
  std::fill(head.wb_w.data->begin(), head.wb_w.data->end(), 0.0);
  head.wb_b.ptr()[2] = 200.0;
  Td h = Td::zeros({4, 4, 4});
  DepthHeadOut<double> out = head.forward(h, 8, 8);
  for (int64_t i = 0; i < out.d_center.numel(); ++i)
    EXPECT_NEAR(out.d_center.ptr()[i], out.centers.ptr()[2], 1e-9);
}

TEST(DepthBins, ZeroResidualGivesBitwiseDcAtInit) {
  ParamRegistry<double> reg(7);
  DepthHead<double> head(reg, "d", 6, {16, 0.1, 8.1});
  Rng rng(11);
  Td h = randn<double>({6, 4, 4}, rng);
  DepthHeadOut<double> out = head.forward(h, 8, 8);
  EXPECT_TRUE(bitwise_equal(out.d_hat, out.d_center));  // W_o zero-initialized
}

TEST(DepthBins, RandomInputInvariants) {
  ParamRegistry<double> reg(13);
  DepthHead<double> head(reg, "d", 6, {16, 0.1, 8.1});
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    Td h = randn<double>({6, 4, 4}, rng, 2.0);
    DepthHeadOut<double> out = head.forward(h, 8, 8);
    double wsum = 0;
    for (int i = 0; i < 16; ++i) wsum += out.widths.ptr()[i];
    EXPECT_NEAR(wsum, 1.0, 1e-6);
    for (int i = 1; i < 16; ++i) EXPECT_GT(out.edges.ptr()[i], out.edges.ptr()[i - 1]);
    EXPECT_NEAR(out.edges.ptr()[15], 8.1, 1e-6);
    for (int64_t i = 0; i < out.d_center.numel(); ++i) {
      EXPECT_GE(out.d_center.ptr()[i], 0.1);
      EXPECT_LE(out.d_center.ptr()[i], 8.1);
    }
  }
}

TEST(DepthBins, ExpectationMonotoneInProbabilityShift) {
  // moving probability mass from bin i to a higher bin j never decreases
  // the expectation sum_i p_i c_i (centers are strictly increasing)
  ParamRegistry<double> reg(19);
  DepthHead<double> head(reg, "d", 4, {8, 0.1, 8.1});
  Rng rng(23);
  Td h = randn<double>({4, 2, 2}, rng);
  DepthHeadOut<double> out = head.forward(h, 4, 4);
  const int nb = 8, hw = 4;
  auto expectation = [&](const std::vector<double>& p) {
    double s = 0;
    for (int i = 0; i < nb; ++i) s += p[(size_t)i] * out.centers.ptr()[i];
    return s;
  };
  std::uniform_int_distribution<int> bdist(0, nb - 1);
  for (int px = 0; px < hw; ++px) {
    std::vector<double> p(nb);
    for (int i = 0; i < nb; ++i) p[(size_t)i] = out.probs.ptr()[i * hw + px];
    const double base = expectation(p);
    for (int trial = 0; trial < 20; ++trial) {
      int i = bdist(rng), j = bdist(rng);
      if (i > j) std::swap(i, j);
      if (i == j) continue;
      std::vector<double> q = p;
      const double eps = 0.5 * q[(size_t)i];
      q[(size_t)i] -= eps;
      q[(size_t)j] += eps;
      EXPECT_GE(expectation(q), base - 1e-12);
    }
  }
}

TEST(DepthBins, InvalidConfigThrows) {
  ParamRegistry<double> reg(29);
  EXPECT_THROW((DepthHead<double>(reg, "d", 4, {1, 0.1, 8.1})), TensorError);
  ParamRegistry<double> reg2(31);
  EXPECT_THROW((DepthHead<double>(reg2, "d2", 4, {8, 9.0, 8.1})), TensorError);
}

TEST(SemanticHead, BiasOnlyLogits) {
  ParamRegistry<double> reg(37);
  ConvHead<double> head(reg, "s", 4, 3);
  head.b2.ptr()[0] = 0.3;
  head.b2.ptr()[1] = 1.7;
  head.b2.ptr()[2] = -0.2;
  Td h = Td::zeros({4, 6, 6});
  Td logits = head.forward(h);
  EXPECT_EQ(logits.shape, (Shape{3, 6, 6}));
  // zero features + zero conv weights paths: logits equal the bias per class
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 36; ++i)
      EXPECT_NEAR(logits.ptr()[c * 36 + i], head.b2.ptr()[c], 1e-12);
  // argmax everywhere = argmax of bias
  for (int i = 0; i < 36; ++i) {
    int best = 0;
    for (int c = 1; c < 3; ++c)
      if (logits.ptr()[c * 36 + i] > logits.ptr()[best * 36 + i]) best = c;
    EXPECT_EQ(best, 1);
  }
}

TEST(SemanticHead, GradCheck) {
  ParamRegistry<double> reg(41);
  ConvHead<double> head(reg, "s", 4, 3);
  Rng rng(43);
  Td h = randn<double>({4, 5, 5}, rng);
  Td proj = randn<double>({3, 5, 5}, rng);
  auto f = [&](Td& t) { return dot(head.forward(t), proj); };
  EXPECT_LE(grad_check<double>(f, h), 1e-5);
}

TEST(NormalHead, NormalizationExamples) {
  Td v = Td::from({3, 1, 1}, {0.0, 0.0, 2.0});
  Td n = l2_normalize_channels(v);
  EXPECT_NEAR(n.ptr()[0], 0.0, 1e-9);
  EXPECT_NEAR(n.ptr()[1], 0.0, 1e-9);
  EXPECT_NEAR(n.ptr()[2], 1.0, 1e-9);
}

TEST(NormalHead, UnitNormWalk) {
  ParamRegistry<double> reg(47);
  ConvHead<double> head(reg, "n", 4, 3);
  Rng rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    Td h = randn<double>({4, 6, 6}, rng, 2.0);
    Td n = l2_normalize_channels(head.forward(h));
    for (int i = 0; i < 36; ++i) {
      double s = 0;
      for (int c = 0; c < 3; ++c) s += n.ptr()[c * 36 + i] * n.ptr()[c * 36 + i];
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-5);
    }
  }
}

TEST(EdgeHead, SigmoidAtZero) {
  Td z = Td::zeros({4});
  Td p = sigmoid(z);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p.ptr()[i], 0.5);
}

TEST(Heads, EndToEndThroughBundle) {
  TaskSet ts = TaskSet::make({Task::depth, Task::sem, Task::norm, Task::edge});
  ParamRegistry<double> reg(59);
  TaskFusion<double> fus(reg, {}, ts, 8);
  HeadsConfig hc;
  hc.num_classes = 3;
  hc.num_bins = 8;
  Heads<double> heads(reg, hc, ts, 8);
  Rng rng(61);
  DecoderState<double> st;
  st.s[5] = randn<double>({8, 2, 2}, rng);
  st.s[4] = randn<double>({8, 4, 4}, rng);
  st.s[3] = randn<double>({8, 8, 8}, rng);
  st.s[2] = randn<double>({8, 16, 16}, rng);
  TaskBundle<double> bundle = heads.forward(fus.forward(st), 32, 32);
  bundle.validate(0.1, 8.1);
  EXPECT_EQ(bundle.depth.shape, (Shape{32, 32}));
  EXPECT_EQ(bundle.sem_logits.shape, (Shape{3, 32, 32}));
  EXPECT_EQ(bundle.normals.shape, (Shape{3, 32, 32}));
  EXPECT_EQ(bundle.edges.shape, (Shape{32, 32}));
  for (Task t : ts.active)
    for (int k : {5, 4, 3, 2}) ASSERT_TRUE(bundle.aux.at(t).count(k));
  EXPECT_EQ(bundle.aux.at(Task::sem).at(2).shape, (Shape{3, 16, 16}));
  EXPECT_EQ(bundle.aux.at(Task::norm).at(5).shape, (Shape{3, 2, 2}));
}

TEST(Heads, DepthHeadGradCheck) {
  ParamRegistry<double> reg(67);
  DepthHead<double> head(reg, "d", 4, {6, 0.1, 8.1});
  Rng rng(71);
  Td h = randn<double>({4, 4, 4}, rng);
  Td proj = randn<double>({8, 8}, rng);
  auto f = [&](Td& t) { return dot(head.forward(t, 8, 8).depth, proj); };
  EXPECT_LE(grad_check<double>(f, h, 1e-5), 1e-4);
}

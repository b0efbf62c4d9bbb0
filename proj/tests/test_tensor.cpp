// SPDX-License-Identifier: Apache-2.0
//
// Core tensor ops against independent oracles: triple-loop matmul, naive
// convolution, finite differences.

#include <gtest/gtest.h>

#include <sstream>

#include "m2hx/gradcheck.hpp"
#include "m2hx/image.hpp"
#include "m2hx/ops.hpp"
#include "m2hx/random.hpp"
#include "m2hx/serialize.hpp"
#include "test_util.hpp"

using namespace m2hx;
using testutil::bitwise_equal;
using testutil::max_abs_diff;

using Td = Tensor<double>;

// --------------------------------------------------------------------------
// Oracles (independent reference implementations)
// --------------------------------------------------------------------------

static Td matmul_reference(const Td& a, const Td& b) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Td out = Td::zeros({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int p = 0; p < k; ++p) s += a.ptr()[i * k + p] * b.ptr()[p * n + j];
      out.ptr()[i * n + j] = s;
    }
  return out;
}

static Td conv2d_reference(const Td& x, const Td& w, const Td& b, int stride, int groups) {
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  const int ho = (h + 2 * ph - kh) / stride + 1, wo = (wd + 2 * pw - kw) / stride + 1;
  const int cing = cin / groups, coutg = cout / groups;
  Td out = Td::zeros({cout, ho, wo});
  for (int oc = 0; oc < cout; ++oc) {
    const int g = oc / coutg;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double s = b.defined() ? b.ptr()[oc] : 0.0;
        for (int ic = 0; ic < cing; ++ic)
          for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
              const int iy = oy * stride + ki - ph, ix = ox * stride + kj - pw;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              s += x.ptr()[((g * cing + ic) * h + iy) * wd + ix] *
                   w.ptr()[((oc * cing + ic) * kh + ki) * kw + kj];
            }
        out.ptr()[(oc * ho + oy) * wo + ox] = s;
      }
  }
  return out;
}

// --------------------------------------------------------------------------
// matmul
// --------------------------------------------------------------------------

TEST(Matmul, IdentityCase) {
  Td a = Td::from({2, 2}, {1, 2, 3, 4});
  Td eye = Td::from({2, 2}, {1, 0, 0, 1});
  Td out = matmul(a, eye);
  EXPECT_TRUE(bitwise_equal(out, a));
}

TEST(Matmul, DirectArithmetic) {
  Td a = Td::from({2, 2}, {1, 2, 3, 4});
  Td b = Td::from({2, 1}, {5, 6});
  Td out = matmul(a, b);
  EXPECT_EQ(out.shape, (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(out.ptr()[0], 17);
  EXPECT_DOUBLE_EQ(out.ptr()[1], 39);
}

TEST(Matmul, TripleLoopOracle) {
  Rng rng(11);
  Td a = randn<double>({5, 7}, rng);
  Td b = randn<double>({7, 3}, rng);
  EXPECT_LE(max_abs_diff(matmul(a, b), matmul_reference(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
  Td a = Td::zeros({2, 3});
  Td b = Td::zeros({4, 2});
  EXPECT_THROW(matmul(a, b), TensorError);
}

TEST(Matmul, NonFiniteOutputThrows) {
  Td a = Td::full({1, 1}, 1e308);
  Td b = Td::full({1, 1}, 1e308);
  EXPECT_THROW(matmul(a, b), NumericError);
}

// --------------------------------------------------------------------------
// conv2d
// --------------------------------------------------------------------------

TEST(Conv2d, DepthwiseIdentityKernel) {
  Rng rng(3);
  Td x = randn<double>({4, 6, 6}, rng);
  Td w = Td::zeros({4, 1, 3, 3});
  for (int c = 0; c < 4; ++c) w.ptr()[c * 9 + 4] = 1.0;  // center one
  Td out = conv2d(x, w, Td(), 1, 4);
  EXPECT_TRUE(bitwise_equal(out, x));
}

TEST(Conv2d, DepthwiseAllOnesConstantField) {
  const double c = 0.7;
  Td x = Td::full({2, 5, 5}, c);
  Td w = Td::full({2, 1, 3, 3}, 1.0);
  Td out = conv2d(x, w, Td(), 1, 2);
  // interior pixels see the full 3x3 support
  for (int ch = 0; ch < 2; ++ch)
    for (int i = 1; i < 4; ++i)
      for (int j = 1; j < 4; ++j) EXPECT_NEAR(out.ptr()[(ch * 5 + i) * 5 + j], 9 * c, 1e-12);
}

TEST(Conv2d, NaiveLoopOracle) {
  Rng rng(17);
  struct Case {
    int cin, cout, h, w, kh, kw, stride, groups;
  };
  for (const Case& cs : {Case{3, 5, 9, 7, 3, 3, 1, 1}, Case{4, 6, 8, 8, 5, 3, 2, 2},
                         Case{6, 6, 7, 9, 3, 5, 1, 6}, Case{2, 4, 6, 6, 1, 1, 1, 1}}) {
    Td x = randn<double>({cs.cin, cs.h, cs.w}, rng);
    Td w = randn<double>({cs.cout, cs.cin / cs.groups, cs.kh, cs.kw}, rng);
    Td b = randn<double>({cs.cout}, rng);
    Td got = conv2d(x, w, b, cs.stride, cs.groups);
    Td want = conv2d_reference(x, w, b, cs.stride, cs.groups);
    EXPECT_LE(max_abs_diff(got, want), 1e-10);
  }
}

TEST(Conv2d, GroupMismatchThrows) {
  Td x = Td::zeros({3, 4, 4});
  Td w = Td::zeros({4, 1, 3, 3});
  EXPECT_THROW(conv2d(x, w, Td(), 1, 2), TensorError);
}

TEST(Conv2d, GradMatchesFiniteDifferences) {
  Rng rng(23);
  Td x = randn<double>({3, 5, 5}, rng);
  Td w = randn<double>({4, 3, 3, 3}, rng, 0.5);
  Td b = randn<double>({4}, rng);
  Td proj = randn<double>({4, 5, 5}, rng);
  w.enable_grad();
  b.enable_grad();
  auto f_x = [&](Td& t) { return dot(conv2d(t, w, b, 1, 1), proj); };
  EXPECT_LE(grad_check<double>(f_x, x), 1e-6);
  auto f_w = [&](Td& t) { return dot(conv2d(x, t, b, 1, 1), proj); };
  EXPECT_LE(grad_check<double>(f_w, w), 1e-6);
  auto f_b = [&](Td& t) { return dot(conv2d(x, w, t, 1, 1), proj); };
  EXPECT_LE(grad_check<double>(f_b, b), 1e-6);
}

// --------------------------------------------------------------------------
// resample
// --------------------------------------------------------------------------

TEST(Resample, PoolMeanOfFour) {
  Td x = Td::from({1, 2, 2}, {1, 2, 3, 4});
  Td out = resample(x, ResampleMode::pool2_avg);
  EXPECT_EQ(out.shape, (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(out.scalar(), 2.5);
}

TEST(Resample, UpPreservesConstantsExactly) {
  Td x = Td::full({3, 4, 4}, 0.37);
  Td out = resample(x, ResampleMode::up2_bilinear);
  EXPECT_EQ(out.shape, (Shape{3, 8, 8}));
  for (int64_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.ptr()[i], 0.37);
}

TEST(Resample, UpThenPoolPreservesGlobalMean) {
  Rng rng(5);
  Td x = randn<double>({2, 6, 6}, rng);
  Td roundtrip = pool2_avg(up2_bilinear(x));
  EXPECT_EQ(roundtrip.shape, x.shape);
  EXPECT_NEAR(mean_all(roundtrip).scalar(), mean_all(x).scalar(), 1e-6);
}

TEST(Resample, OddDimsPoolThrows) {
  Td x = Td::zeros({1, 3, 4});
  EXPECT_THROW(pool2_avg(x), TensorError);
}

TEST(Resample, GradMatchesFiniteDifferences) {
  Rng rng(7);
  Td x = randn<double>({2, 4, 4}, rng);
  Td proj_up = randn<double>({2, 8, 8}, rng);
  auto f_up = [&](Td& t) { return dot(up2_bilinear(t), proj_up); };
  EXPECT_LE(grad_check<double>(f_up, x), 1e-7);
  Td proj_pool = randn<double>({2, 2, 2}, rng);
  auto f_pool = [&](Td& t) { return dot(pool2_avg(t), proj_pool); };
  EXPECT_LE(grad_check<double>(f_pool, x), 1e-7);
}

// --------------------------------------------------------------------------
// softmax
// --------------------------------------------------------------------------

TEST(Softmax, UniformLogits) {
  Td x = Td::zeros({4});
  Td out = softmax(x, 0);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out.ptr()[i], 0.25);
}

TEST(Softmax, DirectArithmetic) {
  Td x = Td::from({2}, {0.0, std::log(3.0)});
  Td out = softmax(x, 0);
  EXPECT_NEAR(out.ptr()[0], 0.25, 1e-15);
  EXPECT_NEAR(out.ptr()[1], 0.75, 1e-15);
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(29);
  Td x = randn<double>({3, 5}, rng);
  Td shifted = add_scalar(x, 17.0);
  EXPECT_LE(max_abs_diff(softmax(x, 1), softmax(shifted, 1)), 1e-12);
}

TEST(Softmax, SumsToOneProperty) {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    Td x = randn<double>({4, 3, 6}, rng, 3.0);
    const int axis = trial % 3;
    Td out = softmax(x, axis);
    // sum along axis must be 1 for every slice
    int64_t outer = 1, inner = 1;
    const int64_t n = x.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        double s = 0;
        for (int64_t i = 0; i < n; ++i) s += out.ptr()[o * n * inner + i * inner + in];
        EXPECT_NEAR(s, 1.0, 1e-6);
        for (int64_t i = 0; i < n; ++i)
          EXPECT_GT(out.ptr()[o * n * inner + i * inner + in], 0.0);
      }
  }
}

// --------------------------------------------------------------------------
// normalize
// --------------------------------------------------------------------------

TEST(Normalize, ConstantInputGivesZero) {
  Td x = Td::full({2, 8}, 3.3);
  Td gamma = Td::full({8}, 1.0), beta = Td::zeros({8});
  Td out = layer_norm(x, gamma, beta, 1e-5);
  for (int64_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.ptr()[i], 0.0, 1e-9);
}

TEST(Normalize, GroupMeanEqualsBeta) {
  Rng rng(37);
  Td x = randn<double>({8, 4, 4}, rng, 2.0, 1.0);
  Td gamma = Td::full({8}, 1.0);
  Td beta = rand_uniform<double>({8}, rng, -1.0, 1.0);
  const int g = 4;
  Td out = group_norm(x, g, gamma, beta, 1e-5);
  // the normalized part is zero-mean per group, so the group mean of the
  // output equals the group mean of beta
  const int cg = 8 / g;
  for (int grp = 0; grp < g; ++grp) {
    double mean_out = 0, mean_beta = 0;
    for (int c = grp * cg; c < (grp + 1) * cg; ++c) {
      mean_beta += beta.ptr()[c] * 16;
      for (int i = 0; i < 16; ++i) mean_out += out.ptr()[c * 16 + i];
    }
    EXPECT_NEAR(mean_out / (cg * 16), mean_beta / (cg * 16), 1e-6);
  }
}

TEST(Normalize, GroupNormWithGEqualsCIsInstanceNorm) {
  Rng rng(41);
  Td x = randn<double>({5, 3, 4}, rng, 1.7, -0.3);
  Td gamma = rand_uniform<double>({5}, rng, 0.5, 1.5);
  Td beta = rand_uniform<double>({5}, rng, -0.5, 0.5);
  Td got = group_norm(x, 5, gamma, beta, 1e-5);
  // per-channel oracle
  Td want = Td::zeros(x.shape);
  for (int c = 0; c < 5; ++c) {
    double m = 0;
    for (int i = 0; i < 12; ++i) m += x.ptr()[c * 12 + i];
    m /= 12;
    double v = 0;
    for (int i = 0; i < 12; ++i) v += (x.ptr()[c * 12 + i] - m) * (x.ptr()[c * 12 + i] - m);
    v /= 12;
    for (int i = 0; i < 12; ++i)
      want.ptr()[c * 12 + i] =
          gamma.ptr()[c] * (x.ptr()[c * 12 + i] - m) / std::sqrt(v + 1e-5) + beta.ptr()[c];
  }
  EXPECT_LE(max_abs_diff(got, want), 1e-10);
}

TEST(Normalize, GroupMismatchThrows) {
  Td x = Td::zeros({6, 2, 2});
  Td gamma = Td::full({6}, 1.0), beta = Td::zeros({6});
  EXPECT_THROW(group_norm(x, 4, gamma, beta, 1e-5), TensorError);
}

TEST(Normalize, GradMatchesFiniteDifferences) {
  Rng rng(43);
  Td x = randn<double>({4, 6}, rng);
  Td gamma = rand_uniform<double>({6}, rng, 0.5, 1.5);
  Td beta = randn<double>({6}, rng);
  Td proj = randn<double>({4, 6}, rng);
  auto f = [&](Td& t) { return dot(layer_norm(t, gamma, beta, 1e-5), proj); };
  EXPECT_LE(grad_check<double>(f, x), 1e-6);
  gamma.enable_grad();
  auto fg = [&](Td& t) { return dot(layer_norm(x, t, beta, 1e-5), proj); };
  EXPECT_LE(grad_check<double>(fg, gamma), 1e-6);
  Td xg = randn<double>({4, 3, 3}, rng);
  Td gg = rand_uniform<double>({4}, rng, 0.5, 1.5), bg = randn<double>({4}, rng);
  Td projg = randn<double>({4, 3, 3}, rng);
  auto fgn = [&](Td& t) { return dot(group_norm(t, 2, gg, bg, 1e-5), projg); };
  EXPECT_LE(grad_check<double>(fgn, xg), 1e-6);
}

// --------------------------------------------------------------------------
// backward / tape
// --------------------------------------------------------------------------

TEST(Backward, SumOfSquaresGradIsTwoX) {
  Rng rng(47);
  Td x = randn<double>({3, 4}, rng);
  x.enable_grad();
  Tape<double> tape;
  Td loss = sum_all(mul(x, x));
  tape.backward(loss);
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.gptr()[i], 2 * x.ptr()[i], 1e-12);
}

TEST(Backward, SumOfSoftmaxIsConstantSoGradZero) {
  Rng rng(53);
  Td x = randn<double>({4, 5}, rng);
  x.enable_grad();
  Tape<double> tape;
  Td loss = sum_all(softmax(x, 1));
  tape.backward(loss);
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.gptr()[i], 0.0, 1e-12);
}

TEST(Backward, CompositeGraphVsFiniteDifferences) {
  Rng rng(59);
  Td x = randn<double>({3, 3}, rng);
  auto f = [&](Td& t) {
    Td a = sigmoid(matmul(t, transpose2d(t)));
    Td b = gelu(add_scalar(a, -0.3));
    return mean_all(mul(b, softmax(b, 1)));
  };
  EXPECT_LE(grad_check<double>(f, x), 1e-5);
}

TEST(Backward, NonScalarLossThrows) {
  Td x = Td::zeros({2, 2});
  x.enable_grad();
  Tape<double> tape;
  Td y = add_scalar(x, 1.0);
  EXPECT_THROW(tape.backward(y), TensorError);
}

TEST(Backward, TapeConsumedThrowsUntilReset) {
  Td x = Td::from({2}, {1.0, 2.0});
  x.enable_grad();
  Tape<double> tape;
  Td loss = sum_all(mul(x, x));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), TensorError);
  tape.reset();
  x.zero_grad();
  Td loss2 = sum_all(mul(x, x));
  tape.backward(loss2);
  EXPECT_NEAR(x.gptr()[0], 2.0, 1e-12);
}

TEST(Backward, SumOfIndependentTermsDistributes) {
  Rng rng(61);
  Td x = randn<double>({6}, rng);
  // grad of f1+f2 equals grad f1 + grad f2
  auto run = [&](int which) {
    Td p = x.clone();
    p.enable_grad();
    Tape<double> tape;
    Td f1 = sum_all(mul(p, p));
    Td f2 = sum_all(sigmoid(p));
    Td loss = which == 0 ? f1 : (which == 1 ? f2 : add(f1, f2));
    tape.backward(loss);
    return std::vector<double>(p.grad->begin(), p.grad->end());
  };
  auto g1 = run(0), g2 = run(1), g12 = run(2);
  for (size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-12);
}

// --------------------------------------------------------------------------
// grad_check itself
// --------------------------------------------------------------------------

TEST(GradCheck, ExactQuadratic) {
  Rng rng(67);
  Td x = randn<double>({8}, rng);
  auto f = [](Td& t) { return sum_all(mul(t, t)); };
  EXPECT_LE(grad_check<double>(f, x, 1e-5), 1e-7);
}

TEST(GradCheck, SigmoidDerivativeAtZero) {
  Td x = Td::zeros({4});
  x.enable_grad();
  Tape<double> tape;
  Td loss = sum_all(sigmoid(x));
  tape.backward(loss);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(x.gptr()[i], 0.25, 1e-12);
  auto f = [](Td& t) { return sum_all(sigmoid(t)); };
  Td x2 = Td::zeros({4});
  EXPECT_LE(grad_check<double>(f, x2), 1e-8);
}

TEST(GradCheck, EpsOutOfRangeThrows) {
  Td x = Td::zeros({2});
  auto f = [](Td& t) { return sum_all(t); };
  EXPECT_THROW(grad_check<double>(f, x, 1e-8), TensorError);
  EXPECT_THROW(grad_check<double>(f, x, 1e-2), TensorError);
}

// --------------------------------------------------------------------------
// misc op coverage
// --------------------------------------------------------------------------

TEST(Ops, SliceConcatRoundTrip) {
  Rng rng(71);
  Td x = randn<double>({5, 6}, rng);
  Td top = slice_rows(x, 0, 2), bot = slice_rows(x, 2, 5);
  Td rt = concat_axis0<double>({top, bot});
  EXPECT_TRUE(bitwise_equal(rt, x));
  Td l = slice_cols(x, 0, 4), r = slice_cols(x, 4, 6);
  Td rt2 = concat_cols<double>({l, r});
  EXPECT_TRUE(bitwise_equal(rt2, x));
}

TEST(Ops, SliceGradScatter) {
  Rng rng(73);
  Td x = randn<double>({4, 4}, rng);
  Td proj = randn<double>({2, 4}, rng);
  auto f = [&](Td& t) { return dot(slice_rows(t, 1, 3), proj); };
  EXPECT_LE(grad_check<double>(f, x), 1e-7);
  Td projc = randn<double>({4, 2}, rng);
  auto fc = [&](Td& t) { return dot(slice_cols(t, 1, 3), projc); };
  EXPECT_LE(grad_check<double>(fc, x), 1e-7);
}

TEST(Ops, BroadcastHelpers) {
  Rng rng(79);
  Td q = randn<double>({5, 3}, rng);
  Td v = randn<double>({3}, rng);
  Td out = mul_row_broadcast(q, v);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j)
      EXPECT_DOUBLE_EQ(out.ptr()[i * 3 + j], q.ptr()[i * 3 + j] * v.ptr()[j]);
  Td proj = randn<double>({5, 3}, rng);
  auto f = [&](Td& t) { return dot(mul_row_broadcast(q, t), proj); };
  EXPECT_LE(grad_check<double>(f, v), 1e-6);

  Td x = randn<double>({3, 2, 2}, rng);
  Td m = randn<double>({1, 2, 2}, rng);
  Td pr = randn<double>({3, 2, 2}, rng);
  auto fm = [&](Td& t) { return dot(mul_channel_map(x, t), pr); };
  EXPECT_LE(grad_check<double>(fm, m), 1e-6);
  auto fs = [&](Td& t) { return dot(channel_sum(t), m); };
  EXPECT_LE(grad_check<double>(fs, x), 1e-7);
  auto fsm = [&](Td& t) { return dot(spatial_mean(t), v); };
  EXPECT_LE(grad_check<double>(fsm, x), 1e-7);
}

TEST(Ops, CentralDiffRampAndGrad) {
  // ramp along x: derivative is the slope in the interior
  Td x = Td::zeros({1, 3, 5});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) x.ptr()[i * 5 + j] = 0.4 * j;
  Td dx = central_diff_x(x);
  for (int i = 0; i < 3; ++i)
    for (int j = 1; j < 4; ++j) EXPECT_NEAR(dx.ptr()[i * 5 + j], 0.4, 1e-12);
  // borders use one-sided half differences
  EXPECT_NEAR(dx.ptr()[0], 0.2, 1e-12);
  Rng rng(83);
  Td r = randn<double>({2, 4, 4}, rng);
  Td proj = randn<double>({2, 4, 4}, rng);
  auto f = [&](Td& t) { return dot(central_diff_y(t), proj); };
  EXPECT_LE(grad_check<double>(f, r), 1e-7);
}

TEST(Ops, UnaryGradSweep) {
  Rng rng(89);
  Td x = rand_uniform<double>({10}, rng, 0.2, 1.8);
  Td proj = randn<double>({10}, rng);
  auto check = [&](auto op) {
    auto f = [&](Td& t) { return dot(op(t), proj); };
    return grad_check<double>(f, x);
  };
  EXPECT_LE(check([](const Td& t) { return exp(t); }), 1e-6);
  EXPECT_LE(check([](const Td& t) { return log(t); }), 1e-6);
  EXPECT_LE(check([](const Td& t) { return sqrt(t); }), 1e-6);
  EXPECT_LE(check([](const Td& t) { return rsqrt(t); }), 1e-6);
  EXPECT_LE(check([](const Td& t) { return gelu(t); }), 1e-6);
  EXPECT_LE(check([](const Td& t) { return softplus(t); }), 1e-6);
  EXPECT_LE(check([](const Td& t) { return square(t); }), 1e-6);
  EXPECT_LE(check([](const Td& t) { return scale(t, -1.7); }), 1e-6);
  EXPECT_LE(check([](const Td& t) { return clamp(t, 0.5, 1.5); }), 1e-6);
}

TEST(Ops, ReshapeSharesBuffers) {
  Td x = Td::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Td r = x.reshaped({3, 2});
  EXPECT_EQ(r.data.get(), x.data.get());
  EXPECT_THROW(x.reshaped({4, 2}), TensorError);
}

TEST(Ops, FiniteCheckCatchesOverflow) {
  Td x = Td::full({4}, 800.0);
  EXPECT_THROW(m2hx::exp(x), NumericError);
}

// --------------------------------------------------------------------------
// serialization
// --------------------------------------------------------------------------

TEST(Serialize, RoundTripF64) {
  Rng rng(97);
  Td x = randn<double>({3, 4, 5}, rng);
  std::stringstream ss;
  write_tensor(ss, x);
  Td y = read_tensor<double>(ss);
  EXPECT_TRUE(bitwise_equal(x, y));
}

TEST(Serialize, RoundTripF32) {
  Rng rng(101);
  Tensor<float> x = randn<float>({7}, rng);
  std::stringstream ss;
  write_tensor(ss, x);
  Tensor<float> y = read_tensor<float>(ss);
  EXPECT_TRUE(bitwise_equal(x, y));
}

TEST(Serialize, TruncatedPayloadThrows) {
  Td x = Td::full({8}, 1.0);
  std::stringstream ss;
  write_tensor(ss, x);
  std::string blob = ss.str();
  std::stringstream cut(blob.substr(0, blob.size() - 9));
  EXPECT_THROW(read_tensor<double>(cut), SerializeError);
}

TEST(Serialize, BadMagicThrows) {
  std::stringstream ss("M2HX-NOPE\ndtype=f64 shape=1\n\0\0\0\0\0\0\0\0");
  EXPECT_THROW(read_tensor<double>(ss), SerializeError);
}

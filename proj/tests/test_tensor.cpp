#include <gtest/gtest.h>

#include <random>

#include "quadnet/batchnorm.hpp"
#include "quadnet/conv.hpp"
#include "quadnet/fft.hpp"
#include "quadnet/gradcheck.hpp"
#include "quadnet/qnt_io.hpp"

using namespace quadnet;

namespace {

template <class T>
Tensor<T> random_tensor(Shape s, unsigned seed, T lo = T(-1), T hi = T(1)) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<T> d(lo, hi);
  Tensor<T> t(std::move(s));
  for (auto& v : t.mutable_data()) v = d(rng);
  return t;
}

template <class T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Tensor, RejectsDataLengthMismatch) {
  EXPECT_THROW(TensorF({2, 3}, std::vector<float>(5)), Error);
}

TEST(Tensor, BackwardAccumulatesIntoLeaves) {
  TensorD x({3}, std::vector<double>{1, 2, 3});
  x.requires_grad();
  auto y = sum(mul(x, x));
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 6.0);
  sum(x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[2], 7.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  TensorD x({2}, 1.0);
  x.requires_grad();
  NoGradGuard g;
  EXPECT_FALSE(add(x, x).needs_grad());
}

TEST(Tensor, SharedSubexpressionGetsBothContributions) {
  TensorD x({1}, std::vector<double>{3});
  x.requires_grad();
  auto y = relu(x);
  auto z = sum(add(mul(y, y), y));  // y^2 + y
  z.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Conv2d, AllOnesCenterIsNine) {
  auto x = TensorF::ones({1, 1, 3, 3});
  auto w = TensorF::ones({1, 1, 3, 3});
  auto y = conv2d(x, w, TensorF(), 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_FLOAT_EQ(y[4], 9.0f);
  EXPECT_FLOAT_EQ(y[0], 4.0f);
}

TEST(Conv2d, DeltaReproducesFlippedKernel) {
  TensorD x({1, 1, 5, 5});
  x.mutable_data()[12] = 1.0;
  auto w = random_tensor<double>({1, 1, 3, 3}, 1);
  auto y = conv2d(x, w, TensorD(), 1, 1);
  // Cross-correlation with a delta places the kernel flipped around the delta.
  for (int di = -1; di <= 1; ++di) {
    for (int dj = -1; dj <= 1; ++dj) {
      EXPECT_DOUBLE_EQ(y[(2 + di) * 5 + (2 + dj)], w[(1 - di) * 3 + (1 - dj)]);
    }
  }
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
  try {
    conv2d(TensorF({1, 2, 4, 4}), TensorF({3, 1, 3, 3}), TensorF(), 1, 1);
    FAIL();
  } catch (const Error& e) {
    std::string m = e.what();
    EXPECT_NE(m.find("(1,2,4,4)"), std::string::npos);
    EXPECT_NE(m.find("(3,1,3,3)"), std::string::npos);
  }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  auto x = random_tensor<double>({2, 3, 8, 8}, 2);
  auto w = random_tensor<double>({4, 3, 3, 3}, 3);
  auto b = random_tensor<double>({4}, 4);
  w.requires_grad();
  b.requires_grad();
  x.requires_grad();
  for (int stride : {1, 2}) {
    double err = grad_check_leaves<double>([&] { return sum(conv2d(x, w, b, stride, 1)); }, {x, w, b});
    EXPECT_LT(err, 1e-5) << "stride " << stride;
  }
  auto w1 = random_tensor<double>({5, 3, 1, 1}, 5);
  w1.requires_grad();
  double err = grad_check_leaves<double>(
      [&] { return sum(mul(conv2d(x, w1, TensorD(), 1, 0), conv2d(x, w1, TensorD(), 1, 0))); }, {x, w1});
  EXPECT_LT(err, 1e-5);
}

TEST(Conv2d, BackwardIsAdjoint) {
  auto w = random_tensor<double>({3, 2, 3, 3}, 6);
  for (int stride : {1, 2}) {
    auto x = random_tensor<double>({2, 2, 9, 8}, 7);
    x.requires_grad();
    auto y = conv2d(x, w, TensorD(), stride, 1);
    auto v = random_tensor<double>(y.shape(), 8);
    y.backward(v);
    double lhs = dot(y, v), rhs = dot(x, x.grad());
    EXPECT_NEAR(lhs, rhs, 1e-6 * std::abs(lhs));
  }
}

TEST(BatchNorm, ConstantChannelNormalizesToZero) {
  TensorF x({2, 1, 3, 3}, 4.5f);
  BatchNormState<float> st(1);
  auto y = batchnorm2d(x, TensorF::ones({1}), TensorF::zeros({1}), st, BnMode::train);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, ZeroGammaCollapsesToBeta) {
  auto x = random_tensor<float>({2, 2, 4, 4}, 9);
  BatchNormState<float> st(2);
  auto y = batchnorm2d(x, TensorF::zeros({2}), TensorF::full({2}, 5.0f), st, BnMode::train);
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 5.0f);
}

TEST(BatchNorm, UpdatesRunningStatsWithMomentum) {
  TensorD x({1, 1, 1, 2}, std::vector<double>{1.0, 3.0});
  BatchNormState<double> st(1);
  batchnorm2d(x, TensorD::ones({1}), TensorD::zeros({1}), st, BnMode::train);
  EXPECT_NEAR(st.running_mean[0], 0.2, 1e-12);
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * 2.0, 1e-12);  // unbiased var of {1,3} is 2
  auto y = batchnorm2d(x, TensorD::ones({1}), TensorD::zeros({1}), st, BnMode::eval);
  EXPECT_NEAR(y[0], (1.0 - 0.2) / std::sqrt(1.1 + 1e-5), 1e-12);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  auto x = random_tensor<double>({3, 2, 4, 4}, 10);
  auto g = random_tensor<double>({2}, 11, 0.5, 1.5);
  auto b = random_tensor<double>({2}, 12);
  auto probe = random_tensor<double>({3, 2, 4, 4}, 13);
  x.requires_grad();
  g.requires_grad();
  b.requires_grad();
  for (BnMode mode : {BnMode::train, BnMode::eval}) {
    BatchNormState<double> st(2);
    double err = grad_check_leaves<double>(
        [&] { return sum(mul(batchnorm2d(x, g, b, st, mode), probe)); }, {x, g, b});
    EXPECT_LT(err, 1e-4);
  }
}

TEST(Relu, ValuesAndZeroSubgradient) {
  TensorD x({3}, std::vector<double>{-1, 0, 2});
  x.requires_grad();
  auto y = relu(x);
  EXPECT_EQ(y.values(), (std::vector<double>{0, 0, 2}));
  sum(y).backward();
  EXPECT_EQ(x.grad().values(), (std::vector<double>{0, 0, 1}));
}

TEST(Relu, AllNegativeGivesZeroGradient) {
  TensorD x({4}, -2.0);
  x.requires_grad();
  auto y = relu(x);
  sum(y).backward();
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  const auto gx = x.grad();
  for (double v : gx.data()) EXPECT_EQ(v, 0.0);
}

TEST(Relu, GradientCheckAwayFromKink) {
  auto x = random_tensor<double>({64}, 14);
  for (auto& v : x.mutable_data()) v += v > 0 ? 0.1 : -0.1;
  double err = grad_check<double>([](const TensorD& t) { return sum(relu(t)); }, x);
  EXPECT_LT(err, 1e-6);
}

TEST(Reducers, SmoothL1Branches) {
  auto z = TensorD::zeros({1});
  EXPECT_NEAR(smooth_l1_loss(TensorD({1}, std::vector<double>{0.4}), z).item(), 0.08, 1e-15);
  EXPECT_NEAR(smooth_l1_loss(TensorD({1}, std::vector<double>{2.0}), z).item(), 1.5, 1e-15);
}

TEST(Reducers, GradientsOfLossesAndStructuralOps) {
  auto a = random_tensor<double>({2, 3, 4, 4}, 15, -3, 3);
  auto b = random_tensor<double>({2, 3, 4, 4}, 16, -3, 3);
  a.requires_grad();
  EXPECT_LT(grad_check_leaves<double>([&] { return l1_loss(a, b); }, {a}), 1e-6);
  EXPECT_LT(grad_check_leaves<double>([&] { return mse_loss(a, b); }, {a}), 1e-6);
  EXPECT_LT(grad_check_leaves<double>([&] { return smooth_l1_loss(a, b); }, {a}), 1e-6);
  auto probe8 = random_tensor<double>({2, 3, 8, 8}, 17);
  EXPECT_LT(grad_check_leaves<double>([&] { return sum(mul(upsample_nearest2x(a), probe8)); }, {a}), 1e-6);
  auto probe2 = random_tensor<double>({2, 3, 2, 2}, 18);
  EXPECT_LT(grad_check_leaves<double>([&] { return sum(mul(maxpool2x2(a), probe2)); }, {a}), 1e-6);
  auto probe_pad = random_tensor<double>({2, 3, 7, 6}, 19);
  EXPECT_LT(grad_check_leaves<double>([&] { return sum(mul(reflect_pad(a, 1, 2, 0, 2), probe_pad)); }, {a}),
            1e-6);
  auto c = random_tensor<double>({1, 3, 4, 4}, 20);
  c.requires_grad();
  EXPECT_LT(grad_check_leaves<double>([&] { return sum_squares(sub(mul(a, c), add(a, c))); }, {a, c}), 1e-5);
  EXPECT_LT(grad_check_leaves<double>(
                [&] { return sum_squares(slice_channels(concat_channels<double>({a, b, a}), 2, 7)); }, {a}),
            1e-5);
  EXPECT_LT(grad_check_leaves<double>([&] { return sum_squares(crop(hypot(a, b), 1, 0, 2, 3)); }, {a}), 1e-5);
}

TEST(Reducers, ConcatShapes) {
  auto y = concat_channels<float>({TensorF({1, 2, 4, 4}), TensorF({1, 3, 4, 4})});
  EXPECT_EQ(y.shape(), (Shape{1, 5, 4, 4}));
}

TEST(Reducers, BroadcastOnlyOverBatch) {
  EXPECT_NO_THROW(add(TensorF({3, 2, 2, 2}), TensorF({1, 2, 2, 2})));
  EXPECT_THROW(add(TensorF({3, 2, 2, 2}), TensorF({3, 1, 2, 2})), Error);
}

TEST(GradCheck, LinearFunctionIsExact) {
  // Integer inputs and a power-of-two step make the differences exact.
  TensorD x({10});
  for (int i = 0; i < 10; ++i) x.mutable_data()[i] = i - 4;
  double err = grad_check<double>([](const TensorD& t) { return sum(t); }, x, std::ldexp(1.0, -17));
  EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, NonFiniteIsAnError) {
  TensorD x({2}, 1.0);
  EXPECT_THROW(grad_check<double>([](const TensorD& t) { return sum(scale(t, std::numeric_limits<double>::infinity())); }, x),
               Error);
}

TEST(Fft, ConstantImageHasOnlyDc) {
  const int H = 6, W = 5;
  TensorD x({1, 1, H, W}, 2.5);
  auto s = rfft2(x);
  ASSERT_EQ(s.real.shape(), (Shape{1, 1, H, 3}));
  // Orthonormal scaling: DC = c * H * W / sqrt(H * W).
  EXPECT_NEAR(s.real[0], 2.5 * H * W / std::sqrt(H * W), 1e-12);
  for (std::size_t i = 1; i < s.real.size(); ++i) EXPECT_NEAR(s.real[i], 0.0, 1e-12);
  for (double v : s.imag.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Fft, DeltaHasFlatSpectrum) {
  const int H = 8, W = 8;
  TensorD x({1, 1, H, W});
  x.mutable_data()[0] = std::sqrt(double(H * W));  // unit magnitude under orthonormal scaling
  auto s = rfft2(x);
  for (std::size_t i = 0; i < s.real.size(); ++i) EXPECT_NEAR(std::hypot(s.real[i], s.imag[i]), 1.0, 1e-12);
}

TEST(Fft, RoundTripAndParseval) {
  auto x = random_tensor<float>({4, 2, 16, 16}, 21);
  auto y = irfft2(rfft2(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
  for (int W : {6, 7}) {
    auto xd = random_tensor<double>({1, 1, 5, W}, 22);
    auto s = rfft2(xd);
    double e = 0;
    for (int i = 0; i < 5; ++i) {
      for (int k = 0; k < s.real.dim(3); ++k) {
        double m = s.real[i * s.real.dim(3) + k] * s.real[i * s.real.dim(3) + k] +
                   s.imag[i * s.real.dim(3) + k] * s.imag[i * s.real.dim(3) + k];
        e += fft::interior_bin(k, W) ? 2 * m : m;
      }
    }
    EXPECT_NEAR(e, dot(xd, xd), 1e-10);
  }
}

TEST(Fft, InverseRejectsInconsistentShape) {
  auto s = rfft2(random_tensor<double>({1, 1, 4, 6}, 23));
  s.width = 9;
  EXPECT_THROW(irfft2(s), Error);
  EXPECT_THROW(rfft2(TensorD({1, 1, 1, 4})), Error);
}

TEST(Fft, TransformsAreExactAdjoints) {
  for (int W : {6, 7}) {
    auto x = random_tensor<double>({2, 3, 5, W}, 24);
    x.requires_grad();
    auto s = rfft2_packed(x);
    auto g = random_tensor<double>(s.shape(), 25);
    s.backward(g);
    EXPECT_NEAR(dot(s, g), dot(x, x.grad()), 1e-12 * std::abs(dot(s, g)) + 1e-12);

    auto spec = random_tensor<double>(s.shape(), 26);
    spec.requires_grad();
    auto y = irfft2_packed(spec, W);
    auto v = random_tensor<double>(y.shape(), 27);
    y.backward(v);
    EXPECT_NEAR(dot(y, v), dot(spec, spec.grad()), 1e-12 * std::abs(dot(y, v)) + 1e-12);
  }
}

TEST(Fft, GradientCheckThroughSpectralPath) {
  auto x = random_tensor<double>({1, 2, 6, 5}, 28);
  auto probe = random_tensor<double>({1, 2, 6, 5}, 29);
  double err = grad_check<double>(
      [&](const TensorD& t) {
        auto s = rfft2(t);
        auto r = complex2real(s);
        auto back = real2complex(relu(r), s.height, s.width);
        return sum(mul(irfft2(back), probe));
      },
      x);
  EXPECT_LT(err, 1e-6);
}

TEST(ComplexStacking, DoublesChannelsAndInverts) {
  auto s = rfft2(random_tensor<double>({2, 3, 4, 6}, 30));
  auto r = complex2real(s);
  EXPECT_EQ(r.shape(), (Shape{2, 6, 4, 4}));
  auto back = real2complex(r, 4, 6);
  EXPECT_EQ(back.real.values(), s.real.values());
  EXPECT_EQ(back.imag.values(), s.imag.values());
  EXPECT_THROW(real2complex(TensorD({1, 3, 4, 4}), 4, 6), Error);
}

TEST(Qnt, RoundTripPreservesShapeDtypeAndValues) {
  auto t = random_tensor<double>({2, 3, 1, 5}, 31);
  std::stringstream ss;
  write_qnt(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.substr(0, 4), "QNT1");
  EXPECT_EQ(static_cast<int>(bytes[4]), 1);
  EXPECT_EQ(bytes.size(), 4 + 1 + 4 + 4 * 4 + t.size() * 8);
  auto r = read_qnt<double>(ss);
  EXPECT_EQ(r.shape(), t.shape());
  EXPECT_EQ(r.values(), t.values());
  std::stringstream bad("QNT2");
  EXPECT_THROW(read_qnt<float>(bad), Error);
}

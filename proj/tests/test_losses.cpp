#include <gtest/gtest.h>

#include <sstream>

#include "quadnet/gradcheck.hpp"
#include "quadnet/metrics.hpp"

using namespace quadnet;

namespace {

TensorD random_image(Shape s, std::uint64_t seed, double lo = 0, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  TensorD t(std::move(s));
  for (auto& v : t.mutable_data()) v = d(rng);
  return t;
}

// SSIM computed directly from the definition, one window at a time.
double ssim_brute(const TensorD& a, const TensorD& b) {
  const int H = a.dim(0), W = a.dim(1), k = 11;
  double w[11][11], ws = 0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      w[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / (2 * 1.5 * 1.5));
      ws += w[i][j];
    }
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  int n = 0;
  for (int r = 0; r + k <= H; ++r)
    for (int c = 0; c + k <= W; ++c) {
      double ma = 0, mb = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          ma += w[i][j] / ws * a[(r + i) * W + c + j];
          mb += w[i][j] / ws * b[(r + i) * W + c + j];
        }
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const double da = a[(r + i) * W + c + j] - ma, db = b[(r + i) * W + c + j] - mb;
          va += w[i][j] / ws * da * da;
          vb += w[i][j] / ws * db * db;
          cov += w[i][j] / ws * da * db;
        }
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++n;
    }
  return total / n;
}

}  // namespace

TEST(Window, CenterClampAndArithmetic) {
  const WindowSpec soft = soft_tissue_window();
  EXPECT_DOUBLE_EQ(apply_window(50.0, soft), 0.5);
  EXPECT_DOUBLE_EQ(apply_window(-200.0, soft), 0.0);
  EXPECT_DOUBLE_EQ(apply_window(-900.0, soft), 0.0);
  EXPECT_DOUBLE_EQ(apply_window(300.0, soft), 1.0);
  EXPECT_DOUBLE_EQ(apply_window(-600.0, lung_window()), 0.5);
  EXPECT_THROW(apply_window(TensorD({1}, {0.0}), WindowSpec{"bad", 0, 0}), Error);
}

TEST(Window, NormalizedPathMatchesHuPath) {
  TensorD n = random_image({1, 1, 5, 5}, 1, -0.2, 1.2);
  TensorD hu = hu_from_normalized(n);
  for (const auto& w : standard_windows()) {
    TensorD a = window_normalized(n, w), b = apply_window(hu, w);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(Sobel, ConstantImageHasNoEdges) {
  TensorD c({1, 1, 6, 7}, 0.25);  // exactly representable, so sums cancel exactly
  const TensorD e = sobel_edge(c);
  for (double v : e.data()) EXPECT_EQ(v, 0.0);
}

TEST(Sobel, VerticalStepGivesFourTimesHeight) {
  const double h = 2.5;
  TensorD s({1, 1, 6, 6});
  for (int i = 0; i < 6; ++i)
    for (int j = 3; j < 6; ++j) s.mutable_data()[i * 6 + j] = h;
  TensorD gx = sobel_x(s), gy = sobel_y(s);
  double mx = 0;
  for (double v : gx.data()) mx = std::max(mx, std::abs(v));
  EXPECT_DOUBLE_EQ(mx, 4 * h);
  for (double v : gy.data()) EXPECT_EQ(v, 0.0);
}

TEST(Sobel, RotationSwapsResponses) {
  TensorD a = random_image({1, 1, 7, 7}, 3);
  TensorD r({1, 1, 7, 7});  // r[i][j] = a[j][i]
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) r.mutable_data()[i * 7 + j] = a[j * 7 + i];
  TensorD ax = sobel_x(a), ry = sobel_y(r);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) EXPECT_NEAR(ax[i * 7 + j], ry[j * 7 + i], 1e-12);
}

TEST(Losses, SfrExamples) {
  TensorD s = random_image({1, 1, 4, 5}, 1), x = random_image({1, 1, 6, 6}, 2);
  EXPECT_EQ(loss_sfr(s, s, x, x).item(), 0.0);
  EXPECT_NEAR(loss_sfr(affine(s, 1.0, 1.0), s, x, x).item(), 1.0, 1e-12);
  EXPECT_THROW(loss_sfr(s, x, x, x), Error);
}

TEST(Losses, LuConstantOffset) {
  TensorD x = random_image({1, 1, 6, 6}, 2);
  EXPECT_EQ(loss_lu(x, x).item(), 0.0);
  EXPECT_NEAR(loss_lu(affine(x, 1.0, -0.25), x).item(), 0.25, 1e-12);
}

TEST(Losses, IfrZeroAtEqualityAndDegenerateConfig) {
  FeatureExtractor<double> phi;
  TensorD x = random_image({1, 1, 16, 16}, 4, -0.1, 1.1), y = random_image({1, 1, 16, 16}, 5, -0.1, 1.1);
  EXPECT_EQ(loss_ifr(x, x, phi).item(), 0.0);
  EXPECT_GT(loss_ifr(x, y, phi).item(), 0.0);
  IfrLossConfig one{{full_window()}, 0.0, 0.0};
  EXPECT_NEAR(loss_ifr(x, y, phi, one).item(),
              l1_loss(window_normalized(x, full_window()), window_normalized(y, full_window())).item(), 1e-15);
  IfrLossConfig bad{{full_window()}, 1.0, 0.1};
  EXPECT_THROW(loss_ifr(x, y, phi, bad), Error);
  // Multi-window l1 is at least the full-window contribution.
  IfrLossConfig multi{standard_windows(), 0.0, 0.0};
  EXPECT_GE(loss_ifr(x, y, phi, multi).item(), loss_ifr(x, y, phi, one).item());
}

TEST(Losses, ExtractorIsFixedAndDeterministic) {
  FeatureExtractor<double> a(0), b(0), c(1);
  for (std::size_t i = 0; i < a.weights.size(); ++i) {
    EXPECT_FALSE(a.weights[i].needs_grad());
    EXPECT_EQ(a.weights[i].values(), b.weights[i].values());
  }
  EXPECT_NE(a.weights[0].values(), c.weights[0].values());
  auto f = a(random_image({1, 3, 16, 16}, 1));
  ASSERT_EQ(f.size(), 3u);
  EXPECT_EQ(f[0].shape(), (Shape{1, 8, 16, 16}));
  EXPECT_EQ(f[1].shape(), (Shape{1, 16, 8, 8}));
  EXPECT_EQ(f[2].shape(), (Shape{1, 32, 4, 4}));
}

TEST(Losses, TotalIsSumOfParts) {
  FeatureExtractor<double> phi;
  TensorD s_r = random_image({1, 1, 8, 6}, 1), s_gt = random_image({1, 1, 8, 6}, 2);
  TensorD x_s = random_image({1, 1, 16, 16}, 3), x_u = random_image({1, 1, 16, 16}, 4);
  TensorD x_r = random_image({1, 1, 16, 16}, 5), x_gt = random_image({1, 1, 16, 16}, 6);
  auto p = loss_total(s_r, s_gt, x_s, x_u, x_r, x_gt, phi);
  const double parts = loss_sfr(s_r, s_gt, x_s, x_gt).item() + loss_lu(x_u, x_gt).item() + loss_ifr(x_r, x_gt, phi).item();
  EXPECT_NEAR(p.total.item(), parts, 1e-7);
  auto zero = loss_total(s_gt, s_gt, x_gt, x_gt, x_gt, x_gt, phi);
  EXPECT_EQ(zero.total.item(), 0.0);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  FeatureExtractor<double> phi;
  TensorD gt = random_image({1, 1, 12, 12}, 7, 0.05, 0.45);
  TensorD s_gt = random_image({1, 1, 6, 5}, 8);
  auto pred = [](const TensorD& g, std::uint64_t seed) { return g + random_image(g.shape(), seed, -0.1, 0.1); };
  EXPECT_LT(grad_check<double>([&](const TensorD& x) { return loss_lu(x, gt); }, pred(gt, 1)), 1e-4);
  EXPECT_LT(grad_check<double>([&](const TensorD& x) { return loss_sfr(pred(s_gt, 3), s_gt, x, gt); }, pred(gt, 2)), 1e-4);
  EXPECT_LT(grad_check<double>([&](const TensorD& s) { return loss_sfr(s, s_gt, pred(gt, 5), gt); }, pred(s_gt, 4)), 1e-4);
  EXPECT_LT(grad_check<double>([&](const TensorD& x) { return loss_ifr(x, gt, phi); }, pred(gt, 6)), 1e-4);
  EXPECT_LT(grad_check<double>([&](const TensorD& x) { return sum(sobel_edge(x)); }, pred(gt, 9)), 1e-4);
}

TEST(Metrics, IdenticalAndOffsetImages) {
  TensorD a = random_image({20, 20}, 1, 0.2, 0.8);
  EXPECT_EQ(rmse(a, a), 0.0);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  TensorD b = affine(a, 1.0, 0.1);
  EXPECT_NEAR(rmse(a, b), 0.1, 1e-12);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
}

TEST(Metrics, MatchBruteForceAndAreSymmetric) {
  for (int k = 0; k < 20; ++k) {
    const int H = 11 + k % 7, W = 12 + k % 5;
    TensorD a = random_image({H, W}, 100 + k), b = random_image({H, W}, 200 + k);
    if (k % 2) b = affine(a, 0.7, 0.1) + random_image({H, W}, 300 + k, -0.05, 0.05);
    double se = 0;
    for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
    const double r = std::sqrt(se / a.size());
    EXPECT_NEAR(rmse(a, b), r, 1e-12);
    EXPECT_NEAR(psnr(a, b), 10 * std::log10(1.0 / (r * r)), 1e-9);
    EXPECT_NEAR(ssim(a, b), ssim_brute(a, b), 1e-6);
    EXPECT_EQ(rmse(a, b), rmse(b, a));
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-15);
  }
  EXPECT_THROW(ssim(TensorD({8, 8}), TensorD({8, 8})), Error);
}

TEST(Metrics, ReportIsMeanOfWindows) {
  TensorD gt = random_image({24, 24}, 1, -1000, 1500), x = random_image({24, 24}, 2, -1000, 1500);
  auto r = metric_report(x, gt);
  ASSERT_EQ(r.per_window.size(), 3u);
  double p = 0, s = 0, e = 0;
  for (auto& w : r.per_window) {
    p += w.psnr / 3;
    s += w.ssim / 3;
    e += w.rmse / 3;
  }
  EXPECT_NEAR(r.psnr, p, 1e-9);
  EXPECT_NEAR(r.ssim, s, 1e-9);
  EXPECT_NEAR(r.rmse, e, 1e-9);
  Warnings warnings;
  auto same = metric_report(gt, gt, standard_windows(), &warnings);
  EXPECT_TRUE(std::isinf(same.psnr));
  EXPECT_EQ(same.psnr_excluded, 3);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Metrics, CsvColumns) {
  std::ostringstream os;
  write_metric_rows(os, {{3, 1, {"soft", 0.1, 20.0, 0.9}}});
  EXPECT_EQ(os.str(), "sample_id,metal_bin,window,rmse,psnr,ssim\n3,1,soft,0.1,20,0.9\n");
  std::ostringstream bs;
  write_bin_summary(bs, {{0, 0, {"full", 0.1, 20, 0.9}}, {1, 1, {"full", 0.1, 30, 0.8}}}, 2);
  EXPECT_NE(bs.str().find("psnr,20.0000,30.0000,25.0000"), std::string::npos) << bs.str();
}

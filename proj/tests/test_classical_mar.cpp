#include <gtest/gtest.h>

#include <random>

#include "quadnet/classical_mar.hpp"
#include "quadnet/physics.hpp"

using namespace quadnet;

namespace {

double trace_rmse(const TensorD& a, const TensorD& b, const TensorD& m) {
  double s = 0;
  int n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (m[i] != 0.0) {
      s += (a[i] - b[i]) * (a[i] - b[i]);
      ++n;
    }
  }
  return std::sqrt(s / std::max(n, 1));
}

TensorD random_grid(Shape s, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> d(0, 5);
  TensorD t(std::move(s));
  for (auto& v : t.mutable_data()) v = d(rng);
  return t;
}

TensorD random_runs(int Nd, int Nv, unsigned seed) {
  std::mt19937 rng(seed);
  TensorD m({Nd, Nv});
  for (int v = 0; v < Nv; ++v) {
    const int a = 1 + static_cast<int>(rng() % (Nd - 8)), len = 1 + static_cast<int>(rng() % 5);
    for (int d = a; d < a + len; ++d) m.mutable_data()[d * Nv + v] = 1.0;
    if (rng() % 3 == 0) m.mutable_data()[0 * Nv + v] = 1.0;  // boundary run
  }
  return m;
}

struct WaterCase {
  FanBeamGeometry g;
  TensorD mask, s_mc, s_gt, trace;
};

// Uniform water disk with a titanium insert near the middle.
WaterCase water_disk_case() {
  WaterCase c;
  c.g = FanBeamGeometry::desk();
  c.g.num_views = 90;
  const int N = c.g.image_size;
  Ellipse body{0, 0, 14, 14, 0, kMuWater, false};
  auto ph = render_phantom({body}, N, c.g.pixel_spacing);
  c.mask = TensorD({N, N});
  for (int i = 28; i < 31; ++i) {
    for (int j = 36; j < 39; ++j) c.mask.mutable_data()[i * N + j] = 1.0;
  }
  auto r = polychromatic_project_full(implant_metal(ph.image, c.mask), SpectrumModel::polychromatic(), c.g, false, 0);
  c.s_mc = r.corrupted.values;
  c.s_gt = r.clean.values;
  c.trace = r.trace;
  return c;
}

}  // namespace

TEST(Li, RestoresDetectorLinearSinogramExactly) {
  const int Nd = 40, Nv = 12;
  TensorD s({Nd, Nv});
  for (int d = 0; d < Nd; ++d) {
    for (int v = 0; v < Nv; ++v) s.mutable_data()[d * Nv + v] = 0.3 * v + (1.5 - 0.1 * v) * d;
  }
  TensorD m({Nd, Nv});
  for (int v = 0; v < Nv; ++v) {
    for (int d = 5 + v; d < 11 + 2 * v; ++d) m.mutable_data()[d * Nv + v] = 1.0;
  }
  TensorD corrupted = s.clone();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] != 0.0) corrupted.mutable_data()[i] = 1e3;
  }
  auto out = li_complete(corrupted, m);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(out[i], s[i], 1e-6);
}

TEST(Li, EmptyTraceIsIdentity) {
  auto s = random_grid({20, 7}, 1);
  auto out = li_complete(s, TensorD({20, 7}));
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(out[i], s[i]);
}

TEST(Li, SingleBinIsMidpoint) {
  TensorD s({5, 1}, std::vector<double>{1, 2, 99, 8, 3});
  TensorD m({5, 1}, std::vector<double>{0, 0, 1, 0, 0});
  EXPECT_DOUBLE_EQ(li_complete(s, m)[2], (2.0 + 8.0) / 2);
}

TEST(Li, EdgeRunsClampToSingleAnchor) {
  TensorD s({6, 1}, std::vector<double>{9, 9, 4, 5, 9, 9});
  TensorD m({6, 1}, std::vector<double>{1, 1, 0, 0, 1, 1});
  auto out = li_complete(s, m);
  EXPECT_EQ(out[0], 4.0);
  EXPECT_EQ(out[1], 4.0);
  EXPECT_EQ(out[4], 5.0);
  EXPECT_EQ(out[5], 5.0);
}

TEST(Li, UntouchedBinsAndIdempotence) {
  auto s = random_grid({30, 9}, 2);
  auto m = random_runs(30, 9, 3);
  auto once = li_complete(s, m), twice = li_complete(once, m);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (m[i] == 0.0) EXPECT_EQ(once[i], s[i]);
    EXPECT_EQ(twice[i], once[i]);
  }
}

TEST(Li, FullyCoveredViewUsesNeighbourViewsAndWarns) {
  const int Nd = 4, Nv = 3;
  TensorD s({Nd, Nv}, std::vector<double>{1, 50, 3, 1, 50, 3, 1, 50, 3, 1, 50, 3});
  TensorD m({Nd, Nv});
  for (int d = 0; d < Nd; ++d) m.mutable_data()[d * Nv + 1] = 1.0;
  Warnings w;
  auto out = li_complete(s, m, &w);
  for (int d = 0; d < Nd; ++d) EXPECT_DOUBLE_EQ(out[d * Nv + 1], 2.0);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_THROW(li_complete(s, TensorD::ones({Nd, Nv})), Error);
}

TEST(Li, RejectsShapeMismatch) { EXPECT_THROW(li_complete(TensorD({4, 3}), TensorD({3, 4})), Error); }

TEST(Nmar, MetalFreeInputUnchanged) {
  auto g = FanBeamGeometry::desk();
  g.num_views = 90;
  auto s = random_grid(g.sinogram_shape(), 4);
  auto out = nmar(s, TensorD(g.sinogram_shape()), g);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(out[i], s[i]);
}

TEST(Nmar, ConstantPriorReducesToLi) {
  auto s = random_grid({30, 9}, 5);
  auto m = random_runs(30, 9, 6);
  TensorD prior({30, 9}, 2.5);
  auto a = nmar_with_prior(s, m, prior), b = li_complete(s, m);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6 * (1 + std::abs(b[i])));
}

TEST(Nmar, AllAirPriorFallsBackToLi) {
  auto s = random_grid({30, 9}, 7);
  auto m = random_runs(30, 9, 8);
  Warnings w;
  auto a = nmar_with_prior(s, m, TensorD({30, 9}), &w), b = li_complete(s, m);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_FALSE(w.empty());
}

TEST(Nmar, BeatsLiOnWaterDisk) {
  auto c = water_disk_case();
  auto li = li_complete(c.s_mc, c.trace);
  auto nm = nmar(c.s_mc, c.trace, c.g);
  const double e_li = trace_rmse(li, c.s_gt, c.trace), e_nm = trace_rmse(nm, c.s_gt, c.trace);
  EXPECT_LE(e_nm, e_li);
  for (std::size_t i = 0; i < nm.size(); ++i) {
    ASSERT_TRUE(std::isfinite(nm[i]));
    if (c.trace[i] == 0.0) EXPECT_EQ(nm[i], c.s_mc[i]);
  }
}

TEST(Nmar, FiniteOnGeneratedSamples) {
  auto g = FanBeamGeometry::desk();
  g.num_views = 90;
  auto data = make_dataset(6, g, SpectrumModel::polychromatic(), MetalLibrary::standard(), 3);
  for (auto& s : data) {
    auto out = nmar(s.s_mc, s.trace, g);
    for (std::size_t i = 0; i < out.size(); ++i) {
      ASSERT_TRUE(std::isfinite(out[i]));
      if (s.trace[i] == 0.0) ASSERT_EQ(out[i], s.s_mc[i]);
    }
  }
}

TEST(Fsnmar, ZeroWeightGivesNmarImage) {
  auto a = random_grid({16, 16}, 9), b = random_grid({16, 16}, 10);
  FsnmarParams p;
  auto out = fsnmar_blend(a, b, TensorD({16, 16}), p);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(out[i], a[i], 1e-12);
}

TEST(Fsnmar, UnitWeightTakesHighPassFromUncorrected) {
  auto a = random_grid({16, 16}, 11), b = random_grid({16, 16}, 12);
  FsnmarParams p;
  auto out = fsnmar_blend(a, b, TensorD::ones({16, 16}), p);
  auto low_a = gaussian_blur(a, 3, 1.0), low_b = gaussian_blur(b, 3, 1.0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(out[i], low_a[i] + (b[i] - low_b[i]), 1e-12);
  // With a zero low band in the NMAR image the output is the pure high band of X_mc.
  auto flat = TensorD({16, 16});
  auto hp = fsnmar_blend(flat, b, TensorD::ones({16, 16}), p);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(hp[i], b[i] - low_b[i], 1e-12);
}

TEST(Fsnmar, KernelScaling) {
  auto p = FsnmarParams{}.scaled_to(64);
  EXPECT_EQ(p.weight_size % 2, 1);
  EXPECT_EQ(p.weight_size, 13);
  EXPECT_NEAR(p.weight_sigma, 45.0 / 8, 1e-12);
  EXPECT_EQ(FsnmarParams{}.scaled_to(8).weight_size, 3);
  EXPECT_EQ(FsnmarParams{}.scaled_to(512).weight_size, 99);
}

TEST(Fsnmar, KeepsMoreHighFrequencyNearMetalThanNmar) {
  auto g = FanBeamGeometry::desk();
  g.num_views = 90;
  const int N = g.image_size;
  // Bone insert right next to the metal.
  Ellipse body{0, 0, 14, 12, 0, kMuWater, false};
  Ellipse bone{3.2, 1.0, 1.6, 1.2, 0.3, 2.2 * kMuWater, true};
  auto ph = render_phantom({body, bone}, N, g.pixel_spacing);
  TensorD mask({N, N});
  for (int i = 30; i < 32; ++i) {
    for (int j = 35; j < 37; ++j) mask.mutable_data()[i * N + j] = 1.0;
  }
  auto r = polychromatic_project_full(implant_metal(ph.image, mask), SpectrumModel::polychromatic(), g, false, 0);
  auto x_mc = fbp(r.corrupted, g);
  auto x_nmar = fbp(Sinogram<double>{g, nmar(r.corrupted.values, r.trace, g)}, g);
  auto x_fs = fsnmar(x_nmar, x_mc, mask);
  auto near = dilate(mask, 9);
  auto hf_energy = [&](const TensorD& x) {
    auto low = gaussian_blur(x, 3, 1.0);
    double e = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (near[i] != 0.0 && mask[i] == 0.0) e += (x[i] - low[i]) * (x[i] - low[i]);
    }
    return e;
  };
  EXPECT_GE(hf_energy(x_fs.values), hf_energy(x_nmar.values));
}

#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>

#include "quadnet/gradcheck.hpp"
#include "quadnet/networks.hpp"
#include "quadnet/physics.hpp"

using namespace quadnet;

namespace {

template <class T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, sd);
  Tensor<T> t(std::move(s));
  for (auto& v : t.mutable_data()) v = static_cast<T>(d(rng));
  return t;
}

double max_abs_diff(const TensorF& a, const TensorF& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <class T>
void set_identity_1x1(Conv<T>& c) {
  auto w = c.weight.mutable_data();
  std::fill(w.begin(), w.end(), T(0));
  const int n = c.weight.dim(0);
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i) * n + i] = T(1);
}

// Perturbs one input pixel and returns the largest output change at `probe`.
template <class Block>
double response_at(Block& blk, int channel, int probe_r, int probe_c) {
  NoGradGuard ng;
  TensorD x = random_tensor<double>({1, blk.channels, 32, 32}, 3);
  TensorD y0 = blk(x, BnMode::eval);
  x.mutable_data()[static_cast<std::size_t>(channel) * 32 * 32] += 1.0;
  TensorD y1 = blk(x, BnMode::eval);
  double m = 0;
  for (int c = 0; c < blk.channels; ++c) {
    const std::size_t i = (static_cast<std::size_t>(c) * 32 + probe_r) * 32 + probe_c;
    m = std::max(m, std::abs(y1[i] - y0[i]));
  }
  return m;
}

FanBeamGeometry tiny_geometry() {
  FanBeamGeometry g = FanBeamGeometry::desk();
  g.image_size = 32;
  g.pixel_spacing *= 2;
  g.num_detectors = 48;
  g.detector_spacing *= 128.0 / 48;
  g.num_views = 40;
  return g;
}

template <class T>
QuadNetBatch<T> random_batch(const FanBeamGeometry& g, int B, std::uint64_t seed) {
  QuadNetBatch<T> b;
  const Shape ss{B, 1, g.num_detectors, g.num_views}, is{B, 1, g.image_size, g.image_size};
  b.s_mc = affine(random_tensor<T>(ss, seed, 0.3), T(1), T(2));
  b.s_gt = affine(random_tensor<T>(ss, seed + 1, 0.3), T(1), T(2));
  b.trace = Tensor<T>(ss);
  b.mask_proj = Tensor<T>(ss);
  auto t = b.trace.mutable_data();
  auto mp = b.mask_proj.mutable_data();
  for (std::size_t i = 0; i < t.size(); ++i) {
    const bool hit = (i / g.num_views) % g.num_detectors >= 20 && (i / g.num_views) % g.num_detectors < 26;
    t[i] = hit ? T(1) : T(0);
    mp[i] = hit ? T(0.3) : T(0);
  }
  b.x_gt = random_tensor<T>(is, seed + 2, 0.1);
  return b;
}

}  // namespace

TEST(FourierUnit, IdentityConfigurationReproducesInput) {
  std::mt19937_64 rng(1);
  for (auto [H, W] : {std::pair{16, 16}, std::pair{12, 20}, std::pair{15, 9}}) {
    FourierUnit<float> fu(3, rng);
    fu.use_bn = false;
    fu.use_relu = false;
    set_identity_1x1(fu.conv);
    NoGradGuard ng;
    TensorF x = random_tensor<float>({2, 3, H, W}, 7);
    TensorF y = fu(x, BnMode::train);
    ASSERT_EQ(y.shape(), x.shape());
    EXPECT_LT(max_abs_diff(x, y), 1e-5) << H << "x" << W;
  }
}

TEST(FfcBlock, SplitsChannelsThreeQuartersGlobal) {
  std::mt19937_64 rng(1);
  FfcBlock<float> b(64, rng);
  EXPECT_EQ(b.cg, 48);
  EXPECT_EQ(b.cl, 16);
  EXPECT_THROW(FfcBlock<float>(1, rng), Error);
}

TEST(FfcBlock, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  FfcBlock<double> blk(4, rng);
  TensorD x = random_tensor<double>({2, 4, 6, 8}, 5);
  TensorD w = random_tensor<double>({2, 4, 6, 8}, 6);
  x.requires_grad(true);
  auto c = collect_all(blk);
  std::vector<TensorD> leaves{x};
  for (auto& [name, t] : c.params) leaves.push_back(*t);
  const double err = grad_check_leaves<double>([&]() { return sum(mul(blk(x, BnMode::train), w)); }, leaves);
  EXPECT_LT(err, 1e-4);
}

TEST(FfcBlock, GlobalBranchSeesWholeImage) {
  std::mt19937_64 rng(2);
  FfcBlock<double> ffc(8, rng);
  SrBlock<double> sr(8, rng);
  // A change in a corner pixel of a global channel reaches the opposite
  // corner of the FFC output, but stays inside the local window of SR-Net.
  EXPECT_GT(response_at(ffc, 7, 16, 16), 1e-6);
  EXPECT_EQ(response_at(sr, 7, 16, 16), 0.0);
  EXPECT_GT(response_at(sr, 7, 1, 1), 1e-6);
}

TEST(SrBlock, ParameterCountMatchesFfcWithinFivePercent) {
  for (int c : {16, 32, 64}) {
    std::mt19937_64 rng(1);
    FfcBlock<float> f(c, rng);
    SrBlock<float> s(c, rng);
    const double pf = static_cast<double>(collect_all(f).num_params());
    const double ps = static_cast<double>(collect_all(s).num_params());
    EXPECT_LT(std::abs(pf - ps) / pf, 0.05) << c << ": " << pf << " vs " << ps;
  }
  EXPECT_EQ(matched_bottleneck(48), 27);
  SfrNet<float> a(SinoMode::completion, 16, 1);
  SrNet<float> b(SinoMode::completion, 16, 1);
  const double na = collect_all(a).num_params(), nb = collect_all(b).num_params();
  EXPECT_LT(std::abs(na - nb) / na, 0.05);
}

TEST(SfrNet, ZeroInitHeadGivesZeroOutputInEveryMode) {
  for (SinoMode m : {SinoMode::completion, SinoMode::enhance_trace, SinoMode::enhance_projection}) {
    SfrNet<float> net(m, 8, 3);
    NoGradGuard ng;
    TensorF s = random_tensor<float>({2, 1, 30, 22}, 1);
    TensorF t(s.shape()), a(s.shape());
    TensorF y = sfr_forward(net, s, t, a, BnMode::train);
    ASSERT_EQ(y.shape(), s.shape()) << sino_mode_name(m);
    for (float v : y.data()) ASSERT_EQ(v, 0.0f);
  }
  EXPECT_THROW(sino_mode("bogus"), Error);
}

TEST(SfrNet, CompletionIgnoresValuesInsideTrace) {
  SfrNet<float> net(SinoMode::completion, 8, 3);
  for (auto& [n, p] : collect_all(net).params) {
    if (n.rfind("out.", 0) == 0) {
      std::mt19937_64 r(9);
      std::normal_distribution<double> d(0, 0.1);
      for (auto& v : p->mutable_data()) v = static_cast<float>(d(r));
    }
  }
  NoGradGuard ng;
  TensorF s = random_tensor<float>({1, 1, 32, 24}, 1);
  TensorF t(s.shape());
  for (int d = 10; d < 14; ++d)
    for (int v = 0; v < 24; ++v) t.mutable_data()[d * 24 + v] = 1;
  TensorF s2 = s.clone();
  for (std::size_t i = 0; i < s2.size(); ++i)
    if (t[i] != 0) s2.mutable_data()[i] += 100.0f;
  TensorF y1 = sfr_forward(net, s, t, t, BnMode::eval);
  TensorF y2 = sfr_forward(net, s2, t, t, BnMode::eval);
  EXPECT_EQ(max_abs_diff(y1, y2), 0.0);
  // The enhancement mode does see them.
  SfrNet<float> enh(SinoMode::enhance_trace, 8, 3);
  for (auto& [n, p] : collect_all(enh).params)
    if (n.rfind("out.", 0) == 0) std::fill(p->mutable_data().begin(), p->mutable_data().end(), 0.05f);
  EXPECT_GT(max_abs_diff(sfr_forward(enh, s, t, t, BnMode::eval), sfr_forward(enh, s2, t, t, BnMode::eval)), 1e-3);
}

TEST(SfrNet, EvalModeOutputIndependentOfBatchComposition) {
  SfrNet<float> net(SinoMode::completion, 8, 5);
  for (auto& [n, p] : collect_all(net).params)
    if (n.rfind("out.", 0) == 0) std::fill(p->mutable_data().begin(), p->mutable_data().end(), 0.05f);
  // Warm up running statistics.
  {
    NoGradGuard ng;
    TensorF s = random_tensor<float>({3, 1, 32, 32}, 1);
    TensorF t(s.shape());
    for (int i = 0; i < 4; ++i) sfr_forward(net, s, t, t, BnMode::train);
  }
  NoGradGuard ng;
  TensorF a = random_tensor<float>({1, 1, 32, 32}, 11);
  TensorF others = random_tensor<float>({3, 1, 32, 32}, 12, 5.0);
  TensorF batch = concat_batch<float>({a, others});
  TensorF ta(a.shape()), tb(batch.shape());
  TensorF ya = sfr_forward(net, a, ta, ta, BnMode::eval);
  TensorF yb = slice_batch(sfr_forward(net, batch, tb, tb, BnMode::eval), 0, 1);
  EXPECT_LT(max_abs_diff(ya, yb), 1e-5);
}

TEST(Normalization, FullWindowAffineMap) {
  TensorD mu({1, 1, 1, 3}, {0.0, kMuWater, 4 * kMuWater});
  TensorD n = normalized_from_mu(mu);
  EXPECT_NEAR(n[0], (-1000.0 + 500) / 3000, 1e-12);
  EXPECT_NEAR(n[1], 500.0 / 3000, 1e-12);
  EXPECT_NEAR(n[2], 3500.0 / 3000, 1e-12);  // not clamped
  TensorD hu = hu_from_normalized(n);
  EXPECT_NEAR(hu[1], 0.0, 1e-9);
}

TEST(QuadNet, ZeroInitialisedHeadsPassThrough) {
  const FanBeamGeometry g = tiny_geometry();
  QuadNet<float> q(g, SinoMode::completion, 8, 1);
  auto b = random_batch<float>(g, 2, 3);
  NoGradGuard ng;
  auto o = q.forward(b, BnMode::train);
  for (float v : o.s_r.data()) ASSERT_EQ(v, 0.0f);
  EXPECT_EQ(max_abs_diff(o.x_r, o.x_u), 0.0);
  EXPECT_EQ(max_abs_diff(o.x_u, o.x_mc), 0.0);
  EXPECT_EQ(o.x_s.shape(), (Shape{2, 1, g.image_size, g.image_size}));
}

TEST(QuadNet, EmptyTraceReconstructsCorruptedSinogram) {
  const FanBeamGeometry g = tiny_geometry();
  QuadNet<float> q(g, SinoMode::enhance_trace, 8, 1);
  for (auto& [n, p] : collect_all(q).params)
    if (n.rfind("sfr.out.", 0) == 0) std::fill(p->mutable_data().begin(), p->mutable_data().end(), 0.05f);
  auto b = random_batch<float>(g, 1, 4);
  b.trace = TensorF(b.trace.shape());
  NoGradGuard ng;
  auto o = q.forward(b, BnMode::eval);
  EXPECT_LT(max_abs_diff(o.x_s, o.x_mc), 1e-6);
}

TEST(QuadNet, ReconGradientVanishesOutsideTrace) {
  const FanBeamGeometry g = tiny_geometry();
  auto b = random_batch<double>(g, 1, 5);
  TensorD s_r = random_tensor<double>(b.s_mc.shape(), 6);
  s_r.requires_grad(true);
  TensorD w = random_tensor<double>({1, 1, g.image_size, g.image_size}, 7);
  sum(mul(replace_and_recon(s_r, b.s_mc, b.trace, g), w)).backward();
  const TensorD gr = s_r.grad();
  double inside = 0;
  for (std::size_t i = 0; i < gr.size(); ++i) {
    if (b.trace[i] == 0) ASSERT_EQ(gr[i], 0.0) << i;
    else inside = std::max(inside, std::abs(gr[i]));
  }
  EXPECT_GT(inside, 0.0);
}

TEST(QuadNet, GradientsReachAllThreeNetworks) {
  const FanBeamGeometry g = tiny_geometry();
  QuadNet<float> q(g, SinoMode::completion, 8, 2);
  auto b = random_batch<float>(g, 1, 8);
  auto o = q.forward(b, BnMode::train);
  (l1_loss(o.s_r, b.s_gt) + l1_loss(o.x_r, b.x_gt)).backward();
  auto c = collect_all(q);
  for (const char* prefix : {"sfr.out.weight", "lu.out.weight", "ifr.out.weight"}) {
    bool found = false;
    for (auto& [n, p] : c.params) {
      if (n != prefix) continue;
      found = true;
      double m = 0;
      const TensorF gp = p->grad();
      for (float v : gp.data()) m = std::max(m, double(std::abs(v)));
      EXPECT_GT(m, 0.0) << n;
    }
    EXPECT_TRUE(found) << prefix;
  }
}

TEST(IfrNet, PlainSkipVariantHasFewerParameters) {
  IfrNet<float> f(8, 1, true), p(8, 1, false);
  EXPECT_GT(collect_all(f).num_params(), collect_all(p).num_params());
  NoGradGuard ng;
  TensorF xs = random_tensor<float>({1, 1, 30, 30}, 1), xu = random_tensor<float>({1, 1, 30, 30}, 2);
  EXPECT_EQ(ifr_forward(f, xs, xu, BnMode::train).shape(), xs.shape());
  EXPECT_EQ(max_abs_diff(ifr_forward(p, xs, xu, BnMode::train), xu), 0.0);
  EXPECT_THROW(f(xs, random_tensor<float>({1, 1, 20, 20}, 3), BnMode::train), Error);
}

TEST(QuadNet, DeskForwardIsFast) {
  FanBeamGeometry g = FanBeamGeometry::desk();
  g.num_views = 90;
  QuadNet<float> q(g, SinoMode::completion, 16, 1);
  auto b = random_batch<float>(g, 1, 1);
  NoGradGuard ng;
  q.forward(b, BnMode::eval);
  const auto t0 = std::chrono::steady_clock::now();
  q.forward(b, BnMode::eval);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  RecordProperty("forward_ms", std::to_string(ms));
  EXPECT_LT(ms, 200.0);
}

TEST(Checkpoint, RoundTripRestoresParametersBuffersAndOptimizer) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "quadnet_ckpt_test";
  fs::remove_all(dir);
  SfrNet<float> a(SinoMode::completion, 8, 1);
  auto ca = collect_all(a);
  Adam<float> opt;
  {
    TensorF s = random_tensor<float>({2, 1, 16, 16}, 1), t(s.shape());
    TensorF target = random_tensor<float>({2, 1, 16, 16}, 2);
    for (int i = 0; i < 2; ++i) {
      opt.zero_grad(ca);
      l1_loss(sfr_forward(a, s, t, t, BnMode::train), target).backward();
      opt.step(ca);
    }
  }
  CheckpointMeta meta;
  meta.values["epoch"] = "2";
  save_checkpoint(dir, ca, &opt, meta);
  save_checkpoint(dir, ca, &opt, meta);  // overwrite in place
  EXPECT_FALSE(fs::exists(dir.string() + ".tmp"));

  SfrNet<float> b(SinoMode::completion, 8, 99);
  auto cb = collect_all(b);
  Adam<float> opt2;
  auto m = load_checkpoint(dir, cb, &opt2);
  EXPECT_EQ(m.values.at("epoch"), "2");
  EXPECT_EQ(opt2.step_count, 2);
  for (std::size_t i = 0; i < ca.params.size(); ++i) {
    ASSERT_EQ(ca.params[i].first, cb.params[i].first);
    EXPECT_EQ(max_abs_diff(*ca.params[i].second, *cb.params[i].second), 0.0) << ca.params[i].first;
  }
  for (std::size_t i = 0; i < ca.buffers.size(); ++i) EXPECT_EQ(*ca.buffers[i].second, *cb.buffers[i].second);
  EXPECT_EQ(opt.state().size(), opt2.state().size());

  SfrNet<float> wrong(SinoMode::completion, 4, 1);
  auto cw = collect_all(wrong);
  EXPECT_THROW(load_checkpoint(dir, cw), Error);
  fs::remove_all(dir);
}

#pragma once

// Registry of central-difference checks over every differentiable layer,
// block and loss, in double precision. Shared by `quadnet gradcheck --all`
// and the acceptance binary.

#include <chrono>
#include <ostream>

#include "quadnet/gradcheck.hpp"
#include "quadnet/losses.hpp"

namespace quadnet {

struct GradCheckCase {
  std::string name;
  std::function<double()> run;  // max relative error
};

struct GradCheckResult {
  std::string name;
  double error = 0;
  double seconds = 0;
  std::string failure;  // set when the check threw
  bool passed(double tol) const { return failure.empty() && error < tol; }
};

inline constexpr double kGradCheckTolerance = 1e-4;

namespace gc_detail {

inline TensorD uniform(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  TensorD t(std::move(s));
  for (auto& v : t.mutable_data()) v = d(rng);
  return t;
}

inline TensorD leaf(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  TensorD t = uniform(std::move(s), seed, lo, hi);
  t.requires_grad(true);
  return t;
}

// Input plus every parameter of a module, probed by a fixed random weighting.
template <class M, class F>
double module_check(M& m, const TensorD& x, F&& call) {
  auto c = collect_all(m);
  std::vector<TensorD> leaves{x};
  for (auto& [n, t] : c.params) leaves.push_back(*t);
  TensorD probe;
  {
    NoGradGuard ng;
    probe = uniform(call(x).shape(), 977);
  }
  return grad_check_leaves<double>([&] { return sum(mul(call(x), probe)); }, leaves);
}

inline FanBeamGeometry tiny_geometry() {
  FanBeamGeometry g = FanBeamGeometry::desk();
  g.image_size = 8;
  g.pixel_spacing = 2.0;
  g.num_detectors = 16;
  g.detector_spacing = 1.2;
  g.num_views = 12;
  g.validate();
  return g;
}

}  // namespace gc_detail

inline std::vector<GradCheckCase> gradcheck_cases() {
  using namespace gc_detail;
  std::vector<GradCheckCase> cs;
  auto reg = [&](std::string n, std::function<double()> f) { cs.push_back({std::move(n), std::move(f)}); };

  // Primitive layers.
  for (int stride : {1, 2}) {
    reg("conv2d_3x3_stride" + std::to_string(stride), [stride] {
      auto x = leaf({2, 3, 7, 8}, 1), w = leaf({4, 3, 3, 3}, 2), b = leaf({4}, 3);
      return grad_check_leaves<double>([&] { return sum_squares(conv2d(x, w, b, stride, 1)); }, {x, w, b});
    });
  }
  reg("conv2d_1x1", [] {
    auto x = leaf({2, 3, 5, 5}, 4), w = leaf({5, 3, 1, 1}, 5);
    return grad_check_leaves<double>([&] { return sum_squares(conv2d(x, w, TensorD(), 1, 0)); }, {x, w});
  });
  for (BnMode mode : {BnMode::train, BnMode::eval}) {
    reg(std::string("batchnorm_") + (mode == BnMode::train ? "train" : "eval"), [mode] {
      auto x = leaf({3, 2, 4, 4}, 6), g = leaf({2}, 7, 0.5, 1.5), b = leaf({2}, 8);
      auto probe = uniform({3, 2, 4, 4}, 9);
      BatchNormState<double> st(2);
      return grad_check_leaves<double>([&] { return sum(mul(batchnorm2d(x, g, b, st, mode), probe)); }, {x, g, b});
    });
  }
  reg("relu", [] {
    // keep values away from the kink
    auto x = leaf({2, 2, 3, 3}, 10, 0.1, 1.0);
    auto sgn = uniform({2, 2, 3, 3}, 11);
    return grad_check_leaves<double>([&] { return sum(relu(mul(x, sgn))); }, {x});
  });
  reg("clamp", [] {
    auto x = leaf({1, 1, 6, 6}, 12, -2, 2);
    return grad_check_leaves<double>([&] { return sum_squares(clamp(x, -0.5, 0.5)); }, {x});
  });
  reg("hypot", [] {
    auto a = leaf({1, 2, 4, 4}, 13), b = leaf({1, 2, 4, 4}, 14);
    return grad_check_leaves<double>([&] { return sum(hypot(a, b)); }, {a, b});
  });
  reg("elementwise_broadcast", [] {
    auto a = leaf({2, 3, 4, 4}, 15), c = leaf({1, 3, 4, 4}, 16);
    return grad_check_leaves<double>([&] { return sum_squares(sub(mul(a, c), add(a, affine(c, 0.5, 0.1)))); }, {a, c});
  });
  reg("mean", [] {
    auto a = leaf({2, 3, 4, 4}, 17);
    return grad_check_leaves<double>([&] { return mean(mul(a, a)); }, {a});
  });
  reg("upsample_nearest2x", [] {
    auto a = leaf({2, 3, 4, 4}, 18);
    auto p = uniform({2, 3, 8, 8}, 19);
    return grad_check_leaves<double>([&] { return sum(mul(upsample_nearest2x(a), p)); }, {a});
  });
  reg("maxpool2x2", [] {
    auto a = leaf({2, 3, 4, 4}, 20);
    auto p = uniform({2, 3, 2, 2}, 21);
    return grad_check_leaves<double>([&] { return sum(mul(maxpool2x2(a), p)); }, {a});
  });
  reg("reflect_pad", [] {
    auto a = leaf({2, 3, 4, 4}, 22);
    auto p = uniform({2, 3, 7, 6}, 23);
    return grad_check_leaves<double>([&] { return sum(mul(reflect_pad(a, 1, 2, 0, 2), p)); }, {a});
  });
  reg("concat_slice_crop", [] {
    auto a = leaf({2, 3, 4, 4}, 24), b = leaf({2, 2, 4, 4}, 25);
    return grad_check_leaves<double>(
        [&] { return sum_squares(crop(slice_channels(concat_channels<double>({a, b, a}), 2, 7), 1, 0, 2, 3)); }, {a, b});
  });
  reg("batch_concat_slice", [] {
    auto a = leaf({2, 2, 3, 3}, 26), b = leaf({1, 2, 3, 3}, 27);
    return grad_check_leaves<double>([&] { return sum_squares(slice_batch(concat_batch<double>({a, b}), 1, 3)); }, {a, b});
  });
  reg("rfft2_irfft2", [] {
    auto x = leaf({1, 2, 6, 5}, 28);
    auto p = uniform({1, 2, 6, 5}, 29);
    return grad_check_leaves<double>(
        [&] {
          auto s = rfft2(x);
          auto back = real2complex(relu(complex2real(s)), s.height, s.width);
          return sum(mul(irfft2(back), p));
        },
        {x});
  });
  reg("rfft2_packed", [] {
    auto x = leaf({1, 2, 4, 6}, 30);
    return grad_check_leaves<double>([&] { return sum_squares(irfft2_packed(affine(rfft2_packed(x), 1.5, 0.2), 6)); },
                                     {x});
  });

  // Reconstruction layer.
  reg("sum_fbp", [] {
    const auto g = tiny_geometry();
    auto s = leaf({1, 1, 16, 12}, 31);
    return grad_check_leaves<double>([&] { return sum(fbp_op(s, g)); }, {s});
  });
  reg("weighted_fbp", [] {
    const auto g = tiny_geometry();
    auto s = leaf({1, 1, 16, 12}, 32);
    auto p = uniform({1, 1, 8, 8}, 33);
    return grad_check_leaves<double>([&] { return sum(mul(fbp_op(s, g), p)); }, {s});
  });

  // Registered modules.
  reg("conv_module", [] {
    std::mt19937_64 rng(34);
    Conv<double> m(2, 3, 3, rng);
    return module_check(m, leaf({2, 2, 5, 5}, 35), [&](const TensorD& x) { return m(x); });
  });
  reg("conv_bn_relu", [] {
    std::mt19937_64 rng(36);
    ConvBnRelu<double> m(2, 3, 3, rng);
    return module_check(m, leaf({2, 2, 5, 5}, 37), [&](const TensorD& x) { return m(x, BnMode::train); });
  });
  reg("fourier_unit", [] {
    std::mt19937_64 rng(38);
    FourierUnit<double> m(2, rng);
    return module_check(m, leaf({2, 2, 6, 5}, 39), [&](const TensorD& x) { return m(x, BnMode::train); });
  });
  reg("ffc_block", [] {
    std::mt19937_64 rng(40);
    FfcBlock<double> m(4, rng);
    return module_check(m, leaf({2, 4, 6, 8}, 41), [&](const TensorD& x) { return m(x, BnMode::train); });
  });
  reg("sr_block", [] {
    std::mt19937_64 rng(42);
    SrBlock<double> m(4, rng);
    return module_check(m, leaf({2, 4, 6, 6}, 43), [&](const TensorD& x) { return m(x, BnMode::train); });
  });
  reg("fourier_skip", [] {
    std::mt19937_64 rng(44);
    FourierSkip<double> m(2, rng);
    return module_check(m, leaf({2, 2, 4, 6}, 45), [&](const TensorD& x) { return m(x, BnMode::train); });
  });

  // Losses.
  reg("loss_sfr", [] {
    const TensorD s_gt = uniform({1, 1, 6, 5}, 46), x_gt = uniform({1, 1, 12, 12}, 47, 0.05, 0.45);
    auto s = leaf({1, 1, 6, 5}, 48), x = leaf({1, 1, 12, 12}, 49, 0.05, 0.45);
    return grad_check_leaves<double>([&] { return loss_sfr(s, s_gt, x, x_gt); }, {s, x});
  });
  reg("loss_lu", [] {
    const TensorD x_gt = uniform({1, 1, 12, 12}, 50, 0.05, 0.45);
    auto x = leaf({1, 1, 12, 12}, 51, 0.05, 0.45);
    return grad_check_leaves<double>([&] { return loss_lu(x, x_gt); }, {x});
  });
  reg("loss_ifr", [] {
    const FeatureExtractor<double> phi(0);
    const TensorD x_gt = uniform({1, 1, 12, 12}, 52, 0.05, 0.45);
    auto x = leaf({1, 1, 12, 12}, 53, 0.05, 0.45);
    return grad_check_leaves<double>([&] { return loss_ifr(x, x_gt, phi); }, {x});
  });
  reg("sobel_edge", [] {
    auto x = leaf({1, 1, 8, 8}, 54);
    return grad_check_leaves<double>([&] { return sum(sobel_edge(x)); }, {x});
  });
  return cs;
}

// Runs every case (or those whose name contains `filter`).
inline std::vector<GradCheckResult> run_gradchecks(const std::string& filter = {}) {
  std::vector<GradCheckResult> out;
  for (const auto& c : gradcheck_cases()) {
    if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
    GradCheckResult r{c.name};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      r.error = c.run();
    } catch (const std::exception& e) {
      r.failure = e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(r);
  }
  return out;
}

}  // namespace quadnet

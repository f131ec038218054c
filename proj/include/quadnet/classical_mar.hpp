#pragma once

// Sinogram-completion baselines: linear interpolation (LI), normalized MAR
// (NMAR) and frequency-split NMAR (FSNMAR).

#include <algorithm>

#include "quadnet/geometry.hpp"

namespace quadnet {

using Warnings = std::vector<std::string>;

inline void warn(Warnings* w, std::string msg) {
  if (w) w->push_back(std::move(msg));
}

inline void expect_same_shape(const TensorD& a, const TensorD& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

// Per view, every maximal run of trace bins along the detector axis is
// replaced by the straight line between its two untouched neighbours. Runs
// touching the array edge take the single available neighbour. A view with
// no untouched bin at all gets the mean of the untouched bins of the nearest
// views on either side.
inline TensorD li_complete(const TensorD& s, const TensorD& m, Warnings* warnings = nullptr) {
  expect_same_shape(s, m, "li_complete");
  if (s.ndim() != 2) throw Error("li_complete: expected a (detectors, views) grid, got " + to_string(s.shape()));
  const int Nd = s.dim(0), Nv = s.dim(1);
  TensorD out = s.clone();
  auto o = out.mutable_data();
  auto hit = [&](int d, int v) { return m[static_cast<std::size_t>(d) * Nv + v] != 0.0; };
  std::vector<int> covered;
  for (int v = 0; v < Nv; ++v) {
    int d = 0;
    bool any_clean = false;
    while (d < Nd) {
      if (!hit(d, v)) {
        any_clean = true;
        ++d;
        continue;
      }
      const int a = d;
      while (d < Nd && hit(d, v)) ++d;
      const int b = d;  // run is [a, b)
      const bool has_lo = a > 0, has_hi = b < Nd;
      if (!has_lo && !has_hi) break;
      const double lo = has_lo ? s[static_cast<std::size_t>(a - 1) * Nv + v] : s[static_cast<std::size_t>(b) * Nv + v];
      const double hi = has_hi ? s[static_cast<std::size_t>(b) * Nv + v] : lo;
      for (int k = a; k < b; ++k) {
        const double t = static_cast<double>(k - a + 1) / (b - a + 1);
        o[static_cast<std::size_t>(k) * Nv + v] = has_lo && has_hi ? lo + t * (hi - lo) : lo;
      }
    }
    if (!any_clean) covered.push_back(v);
  }
  if (!covered.empty()) {
    if (static_cast<int>(covered.size()) == Nv) throw Error("li_complete: every view is fully covered by the trace");
    warn(warnings, "li_complete: " + std::to_string(covered.size()) + " view(s) fully covered by the trace");
    auto clean_mean = [&](int v) {
      double sum = 0;
      int n = 0;
      for (int d = 0; d < Nd; ++d) {
        if (!hit(d, v)) {
          sum += s[static_cast<std::size_t>(d) * Nv + v];
          ++n;
        }
      }
      return std::pair{sum, n};
    };
    for (int v : covered) {
      double sum = 0;
      int n = 0;
      for (int dir : {-1, 1}) {
        for (int step = 1; step < Nv; ++step) {
          auto [s1, n1] = clean_mean(((v + dir * step) % Nv + Nv) % Nv);
          if (n1) {
            sum += s1 / n1;
            ++n;
            break;
          }
        }
      }
      for (int d = 0; d < Nd; ++d) o[static_cast<std::size_t>(d) * Nv + v] = sum / n;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image filters used by the prior and by FSNMAR (2-D grids, clamped borders).

namespace mar_detail {

inline TensorD separable(const TensorD& x, const std::vector<double>& k) {
  const int H = x.dim(0), W = x.dim(1), r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(x.size());
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      double s = 0;
      for (int t = -r; t <= r; ++t) s += k[t + r] * x[i * W + std::clamp(j + t, 0, W - 1)];
      tmp[i * W + j] = s;
    }
  }
  TensorD out(x.shape());
  auto o = out.mutable_data();
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      double s = 0;
      for (int t = -r; t <= r; ++t) s += k[t + r] * tmp[std::clamp(i + t, 0, H - 1) * W + j];
      o[i * W + j] = s;
    }
  }
  return out;
}

}  // namespace mar_detail

inline std::vector<double> gaussian_kernel(int size, double sigma) {
  if (size < 1 || size % 2 == 0) throw Error("gaussian_kernel: size must be odd and positive");
  std::vector<double> k(static_cast<std::size_t>(size));
  double total = 0;
  for (int t = 0; t < size; ++t) {
    const double x = t - size / 2;
    k[t] = std::exp(-x * x / (2 * sigma * sigma));
    total += k[t];
  }
  for (double& v : k) v /= total;
  return k;
}

inline TensorD gaussian_blur(const TensorD& x, int size, double sigma) {
  return mar_detail::separable(x, gaussian_kernel(size, sigma));
}

inline TensorD mean_filter3(const TensorD& x) { return mar_detail::separable(x, {1.0 / 3, 1.0 / 3, 1.0 / 3}); }

// ---------------------------------------------------------------------------
// NMAR

struct NmarThresholds {
  double air_hu = -500.0;   // below: air
  double bone_hu = 400.0;   // above: keep reconstructed value
};

// Three-class prior: air -> 0, soft tissue -> mu_w, bone -> passthrough,
// then a 3x3 mean filter.
inline TensorD nmar_prior(const TensorD& x_mu, const NmarThresholds& th = {}) {
  TensorD p(x_mu.shape());
  auto o = p.mutable_data();
  const double air = kMuWater * (1 + th.air_hu / 1000), bone = kMuWater * (1 + th.bone_hu / 1000);
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = x_mu[i];
    o[i] = v < air ? 0.0 : (v <= bone ? kMuWater : v);
  }
  return mean_filter3(p);
}

// Steps 4-6 of NMAR given the prior sinogram: normalize, interpolate,
// denormalize. Bins outside the trace are copied from the input untouched.
inline TensorD nmar_with_prior(const TensorD& s_mc, const TensorD& m, const TensorD& s_prior, Warnings* warnings = nullptr) {
  expect_same_shape(s_mc, s_prior, "nmar");
  std::vector<double> pos;
  for (double v : s_prior.data()) {
    if (v > 0) pos.push_back(v);
  }
  if (pos.empty()) {
    warn(warnings, "nmar: prior projects to zero everywhere, falling back to LI");
    return li_complete(s_mc, m, warnings);
  }
  std::nth_element(pos.begin(), pos.begin() + pos.size() / 2, pos.end());
  const double floor = 1e-3 * pos[pos.size() / 2];
  TensorD prior(s_prior.shape()), norm(s_mc.shape());
  for (std::size_t i = 0; i < s_mc.size(); ++i) {
    prior.mutable_data()[i] = std::max(s_prior[i], floor);
    norm.mutable_data()[i] = s_mc[i] / prior[i];
  }
  TensorD li = li_complete(norm, m, warnings);
  TensorD out = s_mc.clone();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    if (m[i] != 0.0) o[i] = li[i] * prior[i];
  }
  return out;
}

inline TensorD nmar(const TensorD& s_mc, const TensorD& m, const FanBeamGeometry& g, const NmarThresholds& th = {},
                    Warnings* warnings = nullptr) {
  expect_same_shape(s_mc, m, "nmar");
  bool any = false;
  for (double v : m.data()) any = any || v != 0.0;
  if (!any) return s_mc.clone();
  TensorD li = li_complete(s_mc, m, warnings);
  TensorD x_li = fbp(Sinogram<double>{g, li}, g).values;
  TensorD prior = nmar_prior(x_li, th);
  TensorD s_prior = forward_project(CtImage<double>{prior, Units::mu, g.pixel_spacing}, g).values;
  return nmar_with_prior(s_mc, m, s_prior, warnings);
}

// ---------------------------------------------------------------------------
// FSNMAR

struct FsnmarParams {
  int weight_size = 99;     // at 512 px
  double weight_sigma = 45; // at 512 px
  int highpass_size = 3;
  double highpass_sigma = 1;

  // Weight kernel scaled by image_size/512, kept odd and at least 3.
  FsnmarParams scaled_to(int image_size) const {
    FsnmarParams p = *this;
    const double f = image_size / 512.0;
    int k = static_cast<int>(std::lround(weight_size * f));
    if (k % 2 == 0) ++k;
    p.weight_size = std::max(3, k);
    p.weight_sigma = weight_sigma * f;
    return p;
  }
};

// Blurred metal mask scaled to peak 1: near metal the output takes its high
// frequencies from the uncorrected image.
inline TensorD fsnmar_weight(const TensorD& mask, const FsnmarParams& p) {
  TensorD w = gaussian_blur(mask, p.weight_size, p.weight_sigma);
  double peak = 0;
  for (double v : w.data()) peak = std::max(peak, v);
  if (peak > 0) {
    for (auto& v : w.mutable_data()) v /= peak;
  }
  return w;
}

inline TensorD fsnmar_blend(const TensorD& x_nmar, const TensorD& x_mc, const TensorD& weight, const FsnmarParams& p) {
  expect_same_shape(x_nmar, x_mc, "fsnmar");
  expect_same_shape(x_nmar, weight, "fsnmar");
  TensorD low_n = gaussian_blur(x_nmar, p.highpass_size, p.highpass_sigma);
  TensorD low_m = gaussian_blur(x_mc, p.highpass_size, p.highpass_sigma);
  TensorD out(x_nmar.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double hp_n = x_nmar[i] - low_n[i], hp_m = x_mc[i] - low_m[i];
    o[i] = low_n[i] + weight[i] * hp_m + (1 - weight[i]) * hp_n;
  }
  return out;
}

inline CtImage<double> fsnmar(const CtImage<double>& x_nmar, const CtImage<double>& x_mc, const TensorD& mask,
                              FsnmarParams p = {}) {
  if (x_nmar.units != x_mc.units) throw Error("fsnmar: images carry different units");
  p = p.scaled_to(x_nmar.values.dim(0));
  return {fsnmar_blend(x_nmar.values, x_mc.values, fsnmar_weight(mask, p), p), x_nmar.units, x_nmar.pixel_spacing};
}

}  // namespace quadnet

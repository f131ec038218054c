#pragma once

// Training objectives for the three networks. Images are in normalized
// units n = (HU + 500) / 3000 (see networks.hpp), sinograms in line-integral
// units. Every reduction is a mean.

#include <array>

#include "quadnet/networks.hpp"

namespace quadnet {

struct WindowSpec {
  std::string name;
  double level = 0, width = 1;  // HU

  double low() const { return level - width / 2; }
  double high() const { return level + width / 2; }
};

inline WindowSpec full_window() { return {"full", 1000, 3000}; }
inline WindowSpec lung_window() { return {"lung", -600, 800}; }
inline WindowSpec soft_tissue_window() { return {"soft", 50, 500}; }
inline std::vector<WindowSpec> standard_windows() { return {full_window(), lung_window(), soft_tissue_window()}; }

inline void validate(const WindowSpec& w) {
  if (!(w.width > 0)) throw Error("window '" + w.name + "': width must be positive");
}

// HU -> [0, 1] with clamping (no autodiff).
inline double apply_window(double hu, const WindowSpec& w) {
  return std::clamp((hu - w.low()) / w.width, 0.0, 1.0);
}

inline TensorD apply_window(const TensorD& hu, const WindowSpec& w) {
  validate(w);
  TensorD out(hu.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = apply_window(hu[i], w);
  return out;
}

// Differentiable version on normalized network images.
template <class T>
Tensor<T> window_normalized(const Tensor<T>& n, const WindowSpec& w) {
  validate(w);
  // HU = 3000 n - 500
  const double a = kNormWidthHu / w.width, b = (kNormLowHu - w.low()) / w.width;
  return clamp(affine(n, static_cast<T>(a), static_cast<T>(b)), T(0), T(1));
}

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sobel_kernel(bool along_x) {
  // x: responds to changes along the column index
  const std::array<double, 9> kx{-1, 0, 1, -2, 0, 2, -1, 0, 1};
  const std::array<double, 9> ky{-1, -2, -1, 0, 0, 0, 1, 2, 1};
  Tensor<T> k({1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) k.mutable_data()[i] = static_cast<T>(along_x ? kx[i] : ky[i]);
  return k;
}

template <class T>
Tensor<T> sobel_x(const Tensor<T>& img) {
  return conv2d(reflect_pad(img, 1, 1, 1, 1), sobel_kernel<T>(true), Tensor<T>(), 1, 0);
}

template <class T>
Tensor<T> sobel_y(const Tensor<T>& img) {
  return conv2d(reflect_pad(img, 1, 1, 1, 1), sobel_kernel<T>(false), Tensor<T>(), 1, 0);
}

// Gradient magnitude of a (B, 1, H, W) image.
template <class T>
Tensor<T> sobel_edge(const Tensor<T>& img) {
  if (img.ndim() != 4 || img.dim(1) != 1) throw Error("sobel_edge: expected (B, 1, H, W), got " + to_string(img.shape()));
  return hypot(sobel_x(img), sobel_y(img));
}

// Fixed random stand-in for a pretrained classifier: seven 3x3 conv+ReLU
// layers with max pooling after layers 2 and 4, features tapped after layers
// 2, 4 and 7.
template <class T>
struct FeatureExtractor {
  std::vector<Tensor<T>> weights;
  std::vector<int> taps{2, 4, 7};

  explicit FeatureExtractor(std::uint64_t seed = 0) {
    std::mt19937_64 rng(seed);
    const int chans[8] = {3, 8, 8, 16, 16, 32, 32, 32};
    for (int l = 0; l < 7; ++l) {
      Tensor<T> w = kaiming<T>({chans[l + 1], chans[l], 3, 3}, chans[l] * 9, rng);
      w.requires_grad(false);
      weights.push_back(w);
    }
  }

  std::vector<Tensor<T>> operator()(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != 3) throw Error("FeatureExtractor: expected (B, 3, H, W), got " + to_string(x.shape()));
    std::vector<Tensor<T>> out;
    Tensor<T> h = x;
    for (int l = 1; l <= 7; ++l) {
      h = relu(conv2d(h, weights[l - 1], Tensor<T>(), 1, 1));
      if (std::find(taps.begin(), taps.end(), l) != taps.end()) out.push_back(h);
      if ((l == 2 || l == 4) && h.dim(2) >= 2 && h.dim(3) >= 2) h = maxpool2x2(h);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> loss_sfr(const Tensor<T>& s_r, const Tensor<T>& s_gt, const Tensor<T>& x_s, const Tensor<T>& x_gt) {
  return l1_loss(s_r, s_gt) + smooth_l1_loss(x_s, x_gt);
}

template <class T>
Tensor<T> loss_lu(const Tensor<T>& x_u, const Tensor<T>& x_gt) {
  return l1_loss(x_u, x_gt);
}

struct IfrLossConfig {
  std::vector<WindowSpec> windows = standard_windows();
  double edge_weight = 1.0;
  double perceptual_weight = 0.1;
};

// Sum over windows of l1 + edge l1, plus the perceptual distance between the
// stacked windowed images (needs exactly three windows when enabled).
template <class T>
Tensor<T> loss_ifr(const Tensor<T>& x_r, const Tensor<T>& x_gt, const FeatureExtractor<T>& phi,
                   const IfrLossConfig& cfg = {}) {
  if (x_r.shape() != x_gt.shape()) {
    throw Error("loss_ifr: shape mismatch " + to_string(x_r.shape()) + " vs " + to_string(x_gt.shape()));
  }
  if (cfg.windows.empty()) throw Error("loss_ifr: no windows");
  std::vector<Tensor<T>> wr, wg;
  Tensor<T> total;
  for (const auto& w : cfg.windows) {
    wr.push_back(window_normalized(x_r, w));
    wg.push_back(window_normalized(x_gt, w));
    Tensor<T> term = l1_loss(wr.back(), wg.back());
    if (cfg.edge_weight != 0) {
      term = term + scale(l1_loss(sobel_edge(wr.back()), sobel_edge(wg.back())), static_cast<T>(cfg.edge_weight));
    }
    total = total.size() ? total + term : term;
  }
  if (cfg.perceptual_weight != 0) {
    if (cfg.windows.size() != 3) throw Error("loss_ifr: the perceptual term needs exactly three windows");
    const auto fr = phi(concat_channels(wr));
    std::vector<Tensor<T>> fg;
    {
      NoGradGuard ng;
      fg = phi(concat_channels(wg));
    }
    for (std::size_t i = 0; i < fr.size(); ++i) {
      total = total + scale(mse_loss(fr[i], fg[i]), static_cast<T>(cfg.perceptual_weight));
    }
  }
  return total;
}

template <class T>
struct LossParts {
  Tensor<T> sfr, lu, ifr, total;
};

template <class T>
LossParts<T> loss_total(const Tensor<T>& s_r, const Tensor<T>& s_gt, const Tensor<T>& x_s, const Tensor<T>& x_u,
                        const Tensor<T>& x_r, const Tensor<T>& x_gt, const FeatureExtractor<T>& phi,
                        const IfrLossConfig& cfg = {}) {
  LossParts<T> p;
  p.sfr = loss_sfr(s_r, s_gt, x_s, x_gt);
  p.lu = loss_lu(x_u, x_gt);
  p.ifr = loss_ifr(x_r, x_gt, phi, cfg);
  p.total = p.sfr + p.lu + p.ifr;
  return p;
}

}  // namespace quadnet

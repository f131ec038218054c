#pragma once

// Fan-beam CT with an equispaced flat detector. Detector coordinates are
// measured on a virtual detector line through the rotation center.
//
// Sinograms are (num_detectors, num_views) grids: rows are detector bins,
// columns are view angles. Images are (image_size, image_size) with row 0 at
// the top (+y) and column 0 at the left (-x).
//
// The projector is Joseph's method (linear interpolation along the minor
// axis at each major-axis pixel line). Its adjoint and the FBP backprojector
// are both driven by shared traversal routines so that transposes are exact.

#include <complex>
#include <memory>
#include <mutex>
#include <numbers>

#include "quadnet/fft.hpp"

namespace quadnet {

struct FanBeamGeometry {
  double source_to_center = 59.5;  // cm
  int num_views = 128;
  int num_detectors = 128;
  double detector_spacing = 0.35;  // cm, on the virtual detector through the center
  int image_size = 64;
  double pixel_spacing = 0.64;   // cm
  double angular_range = 360.0;  // degrees
  double start_angle = 0.0;      // degrees

  // Radius of the circle inscribed in the image square.
  double image_radius() const { return 0.5 * image_size * pixel_spacing; }

  // Half-width needed on the virtual detector to see the whole image circle.
  double required_half_width() const {
    const double r = image_radius(), D = source_to_center;
    return r * D / std::sqrt(D * D - r * r);
  }

  void validate() const {
    if (num_views < 1) throw Error("geometry: num_views must be >= 1");
    if (num_detectors < 2) throw Error("geometry: num_detectors must be >= 2");
    if (image_size < 2) throw Error("geometry: image_size must be >= 2");
    if (!(detector_spacing > 0) || !(pixel_spacing > 0) || !(angular_range > 0)) {
      throw Error("geometry: spacings and angular range must be positive");
    }
    if (!(source_to_center > image_radius() * std::sqrt(2.0))) {
      throw Error("geometry: source lies inside the image square");
    }
    if (0.5 * num_detectors * detector_spacing < required_half_width()) {
      throw Error("geometry: detector array (" + std::to_string(num_detectors * detector_spacing) +
                  " cm) does not cover the image circle (needs " + std::to_string(2 * required_half_width()) +
                  " cm)");
    }
  }

  double view_angle(int v) const {
    return (start_angle + angular_range * v / num_views) * std::numbers::pi / 180.0;
  }
  double detector_offset(int d) const { return (d - 0.5 * (num_detectors - 1)) * detector_spacing; }

  Shape sinogram_shape() const { return {num_detectors, num_views}; }
  Shape image_shape() const { return {image_size, image_size}; }

  bool operator==(const FanBeamGeometry&) const = default;

  // 512x512 image, 640 detectors x 640 views over 360 degrees.
  static FanBeamGeometry fullscale() {
    FanBeamGeometry g;
    g.num_views = 640;
    g.num_detectors = 640;
    g.image_size = 512;
    g.pixel_spacing = 0.08;
    g.detector_spacing = 0.07;
    return g;
  }
  // 208x208 image, 320 detectors x 320 views, same field of view.
  static FanBeamGeometry ablation() {
    FanBeamGeometry g;
    g.num_views = 320;
    g.num_detectors = 320;
    g.image_size = 208;
    g.pixel_spacing = 40.96 / 208;
    g.detector_spacing = 0.14;
    return g;
  }
  // 64x64 image, 128 detectors x 128 views, same field of view and source
  // distance.
  static FanBeamGeometry desk() { return FanBeamGeometry{}; }

  static FanBeamGeometry preset(const std::string& name) {
    if (name == "fullscale") return fullscale();
    if (name == "ablation") return ablation();
    if (name == "desk") return desk();
    throw Error("unknown geometry preset '" + name + "'");
  }
};

enum class Units { mu, hu };

// Water attenuation (cm^-1 at ~70 keV) anchoring the HU scale.
inline constexpr double kMuWater = 0.192;

template <class T>
struct Sinogram {
  FanBeamGeometry geometry;
  Tensor<T> values;  // (num_detectors, num_views)
};

template <class T>
struct CtImage {
  Tensor<T> values;  // (image_size, image_size)
  Units units = Units::mu;
  double pixel_spacing = 0.0;
};

template <class T>
CtImage<T> hu_from_mu(const CtImage<T>& img) {
  if (img.units != Units::mu) throw Error("hu_from_mu: image is not in attenuation units");
  std::vector<T> v(img.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(1000.0 * (img.values[i] - kMuWater) / kMuWater);
  return {Tensor<T>(img.values.shape(), std::move(v)), Units::hu, img.pixel_spacing};
}

template <class T>
CtImage<T> mu_from_hu(const CtImage<T>& img) {
  if (img.units != Units::hu) throw Error("mu_from_hu: image is not in HU");
  std::vector<T> v(img.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(kMuWater * (1.0 + img.values[i] / 1000.0));
  return {Tensor<T>(img.values.shape(), std::move(v)), Units::mu, img.pixel_spacing};
}

namespace geom_detail {

struct ViewFrame {
  double c, s;  // source direction (cos, sin)
};

inline std::vector<ViewFrame> frames(const FanBeamGeometry& g) {
  std::vector<ViewFrame> f(g.num_views);
  for (int v = 0; v < g.num_views; ++v) f[v] = {std::cos(g.view_angle(v)), std::sin(g.view_angle(v))};
  return f;
}

// Joseph walk in a generic frame: at step k = 0..N-1 the ray crosses the
// pixel line at fractional position a + b k. `index(k, m)` maps a step and an
// integer position to a pixel. Steps whose two taps are both inside are
// walked without bounds checks.
template <class Index, class Visit>
void joseph_walk(int N, double a, double b, double len, Index&& index, Visit&& visit) {
  auto checked = [&](int k) {
    const double f = a + b * k;
    const double m0 = std::floor(f), w = f - m0;
    const int m = static_cast<int>(m0);
    if (m >= 0 && m < N) visit(index(k, m), (1.0 - w) * len);
    if (m + 1 >= 0 && m + 1 < N) visit(index(k, m + 1), w * len);
  };
  // Conservative interior: a + b k in [margin, N - 1 - margin].
  constexpr double margin = 1e-6;
  double lo = 0, hi = N - 1;
  if (b == 0) {
    if (!(a >= margin && a <= N - 1 - margin)) hi = -1;
  } else {
    const double k1 = (margin - a) / b, k2 = (N - 1 - margin - a) / b;
    lo = std::max(lo, std::ceil(std::min(k1, k2)));
    hi = std::min(hi, std::floor(std::max(k1, k2)));
  }
  if (lo > hi) {
    for (int k = 0; k < N; ++k) checked(k);
    return;
  }
  const int klo = static_cast<int>(lo), khi = static_cast<int>(hi);
  for (int k = 0; k < klo; ++k) checked(k);
  for (int k = klo; k <= khi; ++k) {
    const double f = a + b * k;
    const double m0 = std::floor(f), w = f - m0;
    const int m = static_cast<int>(m0);
    visit(index(k, m), (1.0 - w) * len);
    visit(index(k, m + 1), w * len);
  }
  for (int k = khi + 1; k < N; ++k) checked(k);
}

// Visits (pixel index, weight) pairs of the Joseph line integral along the ray
// from the source to detector bin `det`.
template <class Visit>
void trace_ray(const FanBeamGeometry& g, const ViewFrame& f, int det, Visit&& visit) {
  const int N = g.image_size;
  const double ps = g.pixel_spacing, half = 0.5 * (N - 1);
  const double D = g.source_to_center, u = g.detector_offset(det);
  const double sx = D * f.c, sy = D * f.s;
  const double rx = -u * f.s - sx, ry = u * f.c - sy;
  const std::size_t n = static_cast<std::size_t>(N);
  if (std::abs(rx) >= std::abs(ry)) {
    // column j at x = (j - half) ps, fractional row half - y / ps
    const double slope = ry / rx, len = ps * std::sqrt(1.0 + slope * slope);
    const double a = half - sy / ps + slope * (sx / ps + half);
    joseph_walk(N, a, -slope, len, [n](int j, int i) { return static_cast<std::size_t>(i) * n + j; }, visit);
  } else {
    // row i at y = (half - i) ps, fractional column x / ps + half
    const double slope = rx / ry, len = ps * std::sqrt(1.0 + slope * slope);
    const double a = half + sx / ps + slope * (half - sy / ps);
    joseph_walk(N, a, -slope, len, [n](int i, int j) { return static_cast<std::size_t>(i) * n + j; }, visit);
  }
}

// Visits (detector bin, weight) pairs contributing to pixel `pix` in view
// `f` of the FBP backprojection: linear interpolation on the detector with
// the 1/U^2 distance weight.
template <class Visit>
void backprojection_taps(const FanBeamGeometry& g, const ViewFrame& f, std::size_t pix, double scale,
                         Visit&& visit) {
  const int N = g.image_size;
  const double half = 0.5 * (N - 1), ps = g.pixel_spacing, D = g.source_to_center;
  const int i = static_cast<int>(pix / N), j = static_cast<int>(pix % N);
  const double x = (j - half) * ps, y = (half - i) * ps;
  const double t = x * f.c + y * f.s;
  const double sp = -x * f.s + y * f.c;
  const double U = (D - t) / D;
  const double u = sp / U;
  const double fd = u / g.detector_spacing + 0.5 * (g.num_detectors - 1);
  const double d0 = std::floor(fd), a = fd - d0;
  const int d = static_cast<int>(d0);
  const double w = scale / (U * U);
  if (d >= 0 && d < g.num_detectors) visit(d, (1.0 - a) * w);
  if (d + 1 >= 0 && d + 1 < g.num_detectors) visit(d + 1, a * w);
}

inline void check_len(std::size_t n, const Shape& want, const char* what) {
  if (n != numel(want)) throw Error(std::string(what) + ": size " + std::to_string(n) + " does not match " + to_string(want));
}

}  // namespace geom_detail

namespace geom_detail {

// Every Joseph tap of every ray, rows in sinogram order. Both project_raw and
// adjoint_project_raw read the same table, so they are exact transposes.
struct RayTable {
  std::vector<std::uint32_t> row_begin;  // num rays + 1
  std::vector<std::uint32_t> pixel;
  std::vector<double> weight;

  explicit RayTable(const FanBeamGeometry& g) {
    const auto fr = frames(g);
    row_begin.reserve(static_cast<std::size_t>(g.num_detectors) * g.num_views + 1);
    row_begin.push_back(0);
    for (int d = 0; d < g.num_detectors; ++d) {
      for (int v = 0; v < g.num_views; ++v) {
        trace_ray(g, fr[v], d, [&](std::size_t p, double w) {
          pixel.push_back(static_cast<std::uint32_t>(p));
          weight.push_back(w);
        });
        row_begin.push_back(static_cast<std::uint32_t>(pixel.size()));
      }
    }
  }
};

// Above this many taps (12 bytes each) rays are walked on the fly instead.
inline constexpr double kRayTableMaxTaps = 16e6;

// Cached table for g, or null when g is too large to tabulate.
inline std::shared_ptr<const RayTable> ray_table(const FanBeamGeometry& g) {
  const double taps = 2.0 * g.num_detectors * g.num_views * g.image_size;
  if (taps > kRayTableMaxTaps) return nullptr;
  static std::mutex mu;
  static std::vector<std::pair<FanBeamGeometry, std::shared_ptr<const RayTable>>> cache;
  std::lock_guard lock(mu);
  for (const auto& [key, t] : cache)
    if (key == g) return t;
  if (cache.size() >= 4) cache.erase(cache.begin());
  cache.emplace_back(g, std::make_shared<const RayTable>(g));
  return cache.back().second;
}

}  // namespace geom_detail

// Sinogram <- P image (raw buffers).
template <class T>
void project_raw(const FanBeamGeometry& g, std::span<const T> img, std::span<T> sino) {
  geom_detail::check_len(img.size(), g.image_shape(), "forward_project image");
  geom_detail::check_len(sino.size(), g.sinogram_shape(), "forward_project sinogram");
  if (const auto t = geom_detail::ray_table(g)) {
    const std::uint32_t* px = t->pixel.data();
    const double* wt = t->weight.data();
    for (std::size_t r = 0; r + 1 < t->row_begin.size(); ++r) {
      // four partial sums break the add latency chain
      double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
      std::uint32_t e = t->row_begin[r];
      const std::uint32_t end = t->row_begin[r + 1];
      for (; e + 4 <= end; e += 4) {
        a0 += wt[e] * img[px[e]];
        a1 += wt[e + 1] * img[px[e + 1]];
        a2 += wt[e + 2] * img[px[e + 2]];
        a3 += wt[e + 3] * img[px[e + 3]];
      }
      for (; e < end; ++e) a0 += wt[e] * img[px[e]];
      sino[r] = static_cast<T>((a0 + a1) + (a2 + a3));
    }
    return;
  }
  const auto fr = geom_detail::frames(g);
  for (int v = 0; v < g.num_views; ++v) {
    for (int d = 0; d < g.num_detectors; ++d) {
      double acc = 0;
      geom_detail::trace_ray(g, fr[v], d, [&](std::size_t p, double w) { acc += w * img[p]; });
      sino[static_cast<std::size_t>(d) * g.num_views + v] = static_cast<T>(acc);
    }
  }
}

// Image <- P^T sinogram (raw buffers), same weights as project_raw.
template <class T>
void adjoint_project_raw(const FanBeamGeometry& g, std::span<const T> sino, std::span<T> img) {
  geom_detail::check_len(img.size(), g.image_shape(), "adjoint_project image");
  geom_detail::check_len(sino.size(), g.sinogram_shape(), "adjoint_project sinogram");
  std::vector<double> acc(img.size(), 0.0);
  if (const auto t = geom_detail::ray_table(g)) {
    const std::uint32_t* px = t->pixel.data();
    const double* wt = t->weight.data();
    for (std::size_t r = 0; r + 1 < t->row_begin.size(); ++r) {
      const double s = sino[r];
      if (s == 0) continue;
      for (std::uint32_t e = t->row_begin[r]; e < t->row_begin[r + 1]; ++e) acc[px[e]] += wt[e] * s;
    }
  } else {
    const auto fr = geom_detail::frames(g);
    for (int v = 0; v < g.num_views; ++v) {
      for (int d = 0; d < g.num_detectors; ++d) {
        const double s = sino[static_cast<std::size_t>(d) * g.num_views + v];
        if (s == 0) continue;
        geom_detail::trace_ray(g, fr[v], d, [&](std::size_t p, double w) { acc[p] += w * s; });
      }
    }
  }
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<T>(acc[i]);
}

// Ramp filtering along detectors: cosine pre-weighting, then linear (not
// circular) convolution with the discrete Ram-Lak kernel done by zero-padded
// FFT. The composed map is symmetric up to the diagonal pre-weight.
class RampFilter {
 public:
  explicit RampFilter(const FanBeamGeometry& g)
      : n_(g.num_detectors), len_(fft::next_pow2(2 * static_cast<std::size_t>(g.num_detectors))),
        weight_(g.num_detectors), kernel_(len_) {
    const double ds = g.detector_spacing, D = g.source_to_center, pi = std::numbers::pi;
    for (int d = 0; d < n_; ++d) {
      const double u = g.detector_offset(d);
      weight_[d] = D / std::sqrt(D * D + u * u);
    }
    std::vector<std::complex<double>> h(len_, 0.0);
    for (int k = -(n_ - 1); k <= n_ - 1; ++k) {
      double v = 0;
      if (k == 0) {
        v = 1.0 / (4.0 * ds * ds);
      } else if (k % 2 != 0) {
        v = -1.0 / (pi * pi * k * k * ds * ds);
      }
      h[(k + static_cast<long>(len_)) % len_] = v * ds;  // includes the du of the convolution sum
    }
    fft::transform(h.data(), len_, -1);
    for (std::size_t i = 0; i < len_; ++i) kernel_[i] = h[i].real() / static_cast<double>(len_);
  }

  // In-place filtering of one detector column (stride = num_views).
  template <class T>
  void apply(T* col, std::size_t stride, bool pre_weight) const {
    std::vector<std::complex<double>> buf(len_, 0.0);
    for (int d = 0; d < n_; ++d) buf[d] = static_cast<double>(col[d * stride]) * (pre_weight ? weight_[d] : 1.0);
    fft::transform(buf.data(), len_, -1);
    for (std::size_t i = 0; i < len_; ++i) buf[i] *= kernel_[i];
    fft::transform(buf.data(), len_, +1);
    for (int d = 0; d < n_; ++d) col[d * stride] = static_cast<T>(buf[d].real() * (pre_weight ? 1.0 : weight_[d]));
  }

 private:
  int n_;
  std::size_t len_;
  std::vector<double> weight_;
  std::vector<double> kernel_;
};

namespace geom_detail {
inline double backprojection_scale(const FanBeamGeometry& g) {
  // Each ray is seen twice over a full rotation, hence the 1/2 (pi / 2 pi).
  const double dbeta = g.angular_range * std::numbers::pi / 180.0 / g.num_views;
  return dbeta * std::numbers::pi / (g.angular_range * std::numbers::pi / 180.0);
}
}  // namespace geom_detail

// Filtered backprojection (raw buffers). Short scans are not Parker-weighted.
template <class T>
void fbp_raw(const FanBeamGeometry& g, std::span<const T> sino, std::span<T> img) {
  geom_detail::check_len(img.size(), g.image_shape(), "fbp image");
  geom_detail::check_len(sino.size(), g.sinogram_shape(), "fbp sinogram");
  std::vector<double> q(sino.begin(), sino.end());
  const RampFilter filter(g);
  for (int v = 0; v < g.num_views; ++v) filter.apply(q.data() + v, g.num_views, true);
  const auto fr = geom_detail::frames(g);
  const double scale = geom_detail::backprojection_scale(g);
  for (std::size_t p = 0; p < img.size(); ++p) {
    double acc = 0;
    for (int v = 0; v < g.num_views; ++v) {
      geom_detail::backprojection_taps(g, fr[v], p, scale, [&](int d, double w) {
        acc += w * q[static_cast<std::size_t>(d) * g.num_views + v];
      });
    }
    img[p] = static_cast<T>(acc);
  }
}

// Exact transpose of fbp_raw.
template <class T>
void fbp_transpose_raw(const FanBeamGeometry& g, std::span<const T> img, std::span<T> sino) {
  geom_detail::check_len(img.size(), g.image_shape(), "fbp transpose image");
  geom_detail::check_len(sino.size(), g.sinogram_shape(), "fbp transpose sinogram");
  std::vector<double> q(sino.size(), 0.0);
  const auto fr = geom_detail::frames(g);
  const double scale = geom_detail::backprojection_scale(g);
  for (std::size_t p = 0; p < img.size(); ++p) {
    const double s = img[p];
    if (s == 0) continue;
    for (int v = 0; v < g.num_views; ++v) {
      geom_detail::backprojection_taps(g, fr[v], p, scale, [&](int d, double w) {
        q[static_cast<std::size_t>(d) * g.num_views + v] += w * s;
      });
    }
  }
  const RampFilter filter(g);
  for (int v = 0; v < g.num_views; ++v) filter.apply(q.data() + v, g.num_views, false);
  for (std::size_t i = 0; i < sino.size(); ++i) sino[i] = static_cast<T>(q[i]);
}

template <class T>
Sinogram<T> forward_project(const CtImage<T>& img, const FanBeamGeometry& g) {
  if (img.units != Units::mu) throw Error("forward_project: image must be in attenuation units");
  if (img.values.shape() != g.image_shape()) {
    throw Error("forward_project: image " + to_string(img.values.shape()) + " does not match geometry " +
                to_string(g.image_shape()));
  }
  Tensor<T> s(g.sinogram_shape());
  project_raw<T>(g, img.values.data(), s.mutable_data());
  return {g, s};
}

template <class T>
CtImage<T> adjoint_project(const Sinogram<T>& sino, const FanBeamGeometry& g) {
  if (sino.values.shape() != g.sinogram_shape()) {
    throw Error("adjoint_project: sinogram " + to_string(sino.values.shape()) + " does not match geometry " +
                to_string(g.sinogram_shape()));
  }
  Tensor<T> img(g.image_shape());
  adjoint_project_raw<T>(g, sino.values.data(), img.mutable_data());
  return {img, Units::mu, g.pixel_spacing};
}

template <class T>
CtImage<T> fbp(const Sinogram<T>& sino, const FanBeamGeometry& g) {
  if (sino.values.shape() != g.sinogram_shape()) {
    throw Error("fbp: sinogram " + to_string(sino.values.shape()) + " does not match geometry " +
                to_string(g.sinogram_shape()));
  }
  Tensor<T> img(g.image_shape());
  fbp_raw<T>(g, sino.values.data(), img.mutable_data());
  return {img, Units::mu, g.pixel_spacing};
}

// Differentiable reconstruction layer: (B, 1, Nd, Nv) -> (B, 1, N, N).
template <class T>
Tensor<T> fbp_op(const Tensor<T>& sino, const FanBeamGeometry& g) {
  if (sino.ndim() != 4 || sino.dim(1) != 1 || sino.dim(2) != g.num_detectors || sino.dim(3) != g.num_views) {
    throw Error("fbp_op: expected (B,1," + std::to_string(g.num_detectors) + "," + std::to_string(g.num_views) +
                "), got " + to_string(sino.shape()));
  }
  const int B = sino.dim(0), N = g.image_size;
  const std::size_t ns = numel(g.sinogram_shape()), ni = numel(g.image_shape());
  std::vector<T> out(B * ni);
  for (int b = 0; b < B; ++b) {
    fbp_raw<T>(g, sino.data().subspan(b * ns, ns), std::span<T>(out.data() + b * ni, ni));
  }
  return record<T>(Shape{B, 1, N, N}, std::move(out), {&sino}, [g, B, ns, ni](detail::Node<T>& self) {
    T* gs = self.parent_grad(0);
    std::vector<T> tmp(ns);
    for (int b = 0; b < B; ++b) {
      fbp_transpose_raw<T>(g, std::span<const T>(self.grad.data() + b * ni, ni), tmp);
      for (std::size_t i = 0; i < ns; ++i) gs[b * ns + i] += tmp[i];
    }
  });
}

}  // namespace quadnet

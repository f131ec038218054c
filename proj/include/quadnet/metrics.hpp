#pragma once

// Image quality metrics on windowed [0, 1] images, and the three-window
// report used for evaluation tables.

#include <cstdio>
#include <limits>
#include <ostream>

#include "quadnet/classical_mar.hpp"
#include "quadnet/losses.hpp"

namespace quadnet {

namespace metric_detail {

inline void check_pair(const TensorD& a, const TensorD& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (a.size() == 0) throw Error(std::string(what) + ": empty images");
}

// Last two axes are (H, W); everything before is treated as separate planes.
inline std::pair<int, int> plane_dims(const TensorD& a) {
  if (a.ndim() < 2) throw Error("metrics: expected at least 2-D images, got " + to_string(a.shape()));
  return {a.dim(a.ndim() - 2), a.dim(a.ndim() - 1)};
}

}  // namespace metric_detail

inline double rmse(const TensorD& a, const TensorD& b) {
  metric_detail::check_pair(a, b, "rmse");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

// Peak 1. Identical images give +infinity.
inline double psnr(const TensorD& a, const TensorD& b) {
  const double r = rmse(a, b);
  if (r == 0) return std::numeric_limits<double>::infinity();
  return -20.0 * std::log10(r);
}

struct SsimParams {
  int window = 11;
  double sigma = 1.5, k1 = 0.01, k2 = 0.03, range = 1.0;
};

// Mean SSIM over the positions where the Gaussian window fits entirely
// inside the image, averaged over planes.
inline double ssim(const TensorD& a, const TensorD& b, const SsimParams& p = {}) {
  metric_detail::check_pair(a, b, "ssim");
  const auto [H, W] = metric_detail::plane_dims(a);
  const int k = p.window;
  if (H < k || W < k) throw Error("ssim: image " + to_string(a.shape()) + " smaller than the window");
  std::vector<double> g(k);
  double gs = 0;
  for (int t = 0; t < k; ++t) {
    const double x = t - (k - 1) / 2.0;
    g[t] = std::exp(-x * x / (2 * p.sigma * p.sigma));
    gs += g[t];
  }
  for (double& v : g) v /= gs;
  const double c1 = (p.k1 * p.range) * (p.k1 * p.range), c2 = (p.k2 * p.range) * (p.k2 * p.range);
  const int Ho = H - k + 1, Wo = W - k + 1;
  const std::size_t planes = a.size() / (static_cast<std::size_t>(H) * W);

  // Filters the five moment images separably, valid region only.
  auto filter = [&](const double* x, std::vector<double>& out) {
    std::vector<double> rows(static_cast<std::size_t>(H) * Wo);
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < Wo; ++j) {
        double s = 0;
        for (int t = 0; t < k; ++t) s += g[t] * x[i * W + j + t];
        rows[i * Wo + j] = s;
      }
    out.assign(static_cast<std::size_t>(Ho) * Wo, 0.0);
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        double s = 0;
        for (int t = 0; t < k; ++t) s += g[t] * rows[(i + t) * Wo + j];
        out[i * Wo + j] = s;
      }
  };

  double total = 0;
  const std::size_t n = static_cast<std::size_t>(H) * W;
  std::vector<double> aa(n), bb(n), ab(n), mu_a, mu_b, s_aa, s_bb, s_ab;
  for (std::size_t p_ = 0; p_ < planes; ++p_) {
    const double* pa = a.data().data() + p_ * n;
    const double* pb = b.data().data() + p_ * n;
    for (std::size_t i = 0; i < n; ++i) {
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    filter(pa, mu_a);
    filter(pb, mu_b);
    filter(aa.data(), s_aa);
    filter(bb.data(), s_bb);
    filter(ab.data(), s_ab);
    double plane = 0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double ma = mu_a[i], mb = mu_b[i];
      const double va = s_aa[i] - ma * ma, vb = s_bb[i] - mb * mb, cov = s_ab[i] - ma * mb;
      plane += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total += plane / static_cast<double>(mu_a.size());
  }
  return total / static_cast<double>(planes);
}

// ---------------------------------------------------------------------------
// Three-window report on HU images.

struct WindowScores {
  std::string window;
  double rmse = 0, psnr = 0, ssim = 0;
};

struct MetricReport {
  std::vector<WindowScores> per_window;
  double rmse = 0, psnr = 0, ssim = 0;  // arithmetic means over windows
  int psnr_excluded = 0;                // infinite PSNRs left out of the mean
};

inline MetricReport metric_report(const TensorD& x_hu, const TensorD& gt_hu,
                                  const std::vector<WindowSpec>& windows = standard_windows(),
                                  Warnings* warnings = nullptr) {
  MetricReport r;
  int finite = 0;
  for (const auto& w : windows) {
    const TensorD a = apply_window(x_hu, w), b = apply_window(gt_hu, w);
    WindowScores s{w.name, rmse(a, b), psnr(a, b), ssim(a, b)};
    r.rmse += s.rmse;
    r.ssim += s.ssim;
    if (std::isfinite(s.psnr)) {
      r.psnr += s.psnr;
      ++finite;
    } else {
      ++r.psnr_excluded;
    }
    r.per_window.push_back(s);
  }
  const double n = static_cast<double>(windows.size());
  r.rmse /= n;
  r.ssim /= n;
  if (finite) {
    r.psnr /= finite;
  } else {
    r.psnr = std::numeric_limits<double>::infinity();
  }
  if (r.psnr_excluded) warn(warnings, "metric_report: " + std::to_string(r.psnr_excluded) + " infinite PSNR value(s) excluded from the mean");
  return r;
}

// Averages of a list of reports (window means), skipping infinite PSNRs.
struct MeanReport {
  double rmse = 0, psnr = 0, ssim = 0;
};

inline MeanReport mean_of(const std::vector<MetricReport>& rs) {
  MeanReport m;
  int finite = 0;
  for (const auto& r : rs) {
    m.rmse += r.rmse;
    m.ssim += r.ssim;
    if (std::isfinite(r.psnr)) {
      m.psnr += r.psnr;
      ++finite;
    }
  }
  if (!rs.empty()) {
    m.rmse /= rs.size();
    m.ssim /= rs.size();
  }
  m.psnr = finite ? m.psnr / finite : std::numeric_limits<double>::infinity();
  return m;
}

// ---------------------------------------------------------------------------
// CSV

struct MetricRow {
  int sample_id = 0, metal_bin = 0;
  WindowScores scores;
};

inline void write_metric_rows(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "sample_id,metal_bin,window,rmse,psnr,ssim\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%s,%.9g,%.9g,%.9g\n", r.sample_id, r.metal_bin, r.scores.window.c_str(),
                  r.scores.rmse, r.scores.psnr, r.scores.ssim);
    os << buf;
  }
}

// Per metal-size bin (small to large) averages over samples and windows.
inline void write_bin_summary(std::ostream& os, const std::vector<MetricRow>& rows, int num_bins) {
  os << "metric";
  for (int b = 0; b < num_bins; ++b) os << ",bin" << b;
  os << ",average\n";
  for (const char* metric : {"psnr", "ssim", "rmse"}) {
    os << metric;
    double all = 0;
    int all_n = 0;
    char buf[64];
    for (int b = 0; b <= num_bins; ++b) {
      double s = 0;
      int n = 0;
      for (const auto& r : rows) {
        if (b < num_bins && r.metal_bin != b) continue;
        const double v = metric[0] == 'p' ? r.scores.psnr : (metric[0] == 's' ? r.scores.ssim : r.scores.rmse);
        if (!std::isfinite(v)) continue;
        s += v;
        ++n;
      }
      if (b == num_bins) {
        all = s;
        all_n = n;
        break;
      }
      std::snprintf(buf, sizeof buf, ",%.4f", n ? s / n : std::nan(""));
      os << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.4f\n", all_n ? all / all_n : std::nan(""));
    os << buf;
  }
}

}  // namespace quadnet

#pragma once

// Degradation of trained models when the metal mask handed to them is
// dilated: Trace-k sweeps for sinogram networks, Mask-k sweeps for the full
// pipeline, and dilation as data augmentation.

#include <ostream>

#include "quadnet/training.hpp"

namespace quadnet {

// A sample whose mask has been dilated with kernel k; S_mc is untouched.
inline Sample with_dilated_mask(const Sample& s, const FanBeamGeometry& g, int k) {
  Sample out = s;
  if (k <= 1) return out;
  out.mask = dilate(s.mask, k);
  const TensorD proj = mask_projection(out.mask, g).values;
  out.mask_proj = proj;
  out.trace = trace_from_projection(proj);
  return out;
}

inline double area(const TensorD& m) {
  double a = 0;
  for (double v : m.data()) a += v != 0.0;
  return a;
}

inline bool is_subset(const TensorD& a, const TensorD& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != 0.0 && b[i] == 0.0) return false;
  }
  return true;
}

// Throws unless traces grow monotonically (nested) along `kernels`.
inline void check_nesting(const Sample& s, const FanBeamGeometry& g, const std::vector<int>& kernels) {
  for (std::size_t i = 1; i < kernels.size(); ++i) {
    if (kernels[i] < kernels[i - 1]) throw Error("sweep: kernels must be non-decreasing");
    const TensorD a = with_dilated_mask(s, g, kernels[i - 1]).trace, b = with_dilated_mask(s, g, kernels[i]).trace;
    if (!is_subset(a, b)) {
      throw Error("sweep: trace for kernel " + std::to_string(kernels[i - 1]) + " is not inside kernel " +
                  std::to_string(kernels[i]) + " on sample " + std::to_string(s.index));
    }
  }
}

struct MeanStd {
  double mean = 0, std = 0;  // population std
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= v.size();
  for (double x : v) m.std += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(m.std / v.size());
  return m;
}

// One row per kernel: scores averaged over samples.
struct SweepRow {
  int kernel = 0;
  double sino_rmse = 0;   // spliced sinogram vs S_gt
  double image_rmse = 0;  // three-window average on the reconstruction
  double psnr = 0, ssim = 0;
};

struct SweepTable {
  std::string label;
  std::vector<SweepRow> rows;

  std::vector<double> column(double SweepRow::*f) const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.*f);
    return v;
  }
  MeanStd summary(double SweepRow::*f) const { return mean_std(column(f)); }
  // last / first of a column, e.g. RMSE(Trace7) / RMSE(Trace0)
  double ratio(double SweepRow::*f) const { return rows.back().*f / rows.front().*f; }
};

// Sinogram network under dilated traces. For each sample the restored
// sinogram is spliced into S_mc over the dilated trace and reconstructed.
template <class T, class Block>
SweepTable run_trace_sweep(SinoNet<T, Block>& net, const std::vector<Sample>& samples, const FanBeamGeometry& g,
                           const std::vector<int>& kernels, std::string label = {}) {
  NoGradGuard ng;
  SweepTable t{label.empty() ? sino_mode_name(net.mode) : label, {}};
  for (const auto& s : samples) check_nesting(s, g, kernels);
  for (int k : kernels) {
    SweepRow row{k};
    std::vector<MetricReport> reps;
    for (const auto& s0 : samples) {
      const Sample s = with_dilated_mask(s0, g, k);
      const TrainSet<T> one = to_train_set<T>({s}, g);
      const Tensor<T>& aux = net.mode == SinoMode::enhance_projection ? one.mask_proj : one.trace;
      Tensor<T> s_r = sfr_forward(net, one.s_mc, one.trace, aux, BnMode::eval);
      Tensor<T> spliced = mul(s_r, one.trace) + mul(one.s_mc, affine(one.trace, T(-1), T(1)));
      row.sino_rmse += rmse(plane(spliced, 0), s.s_gt);
      const TensorD x = plane(fbp_op(spliced, g), 0);
      reps.push_back(metric_report(hu_of_mu(x), hu_of_mu(s.x_gt)));
    }
    row.sino_rmse /= samples.size();
    const MeanReport m = mean_of(reps);
    row.image_rmse = m.rmse;
    row.psnr = m.psnr;
    row.ssim = m.ssim;
    t.rows.push_back(row);
  }
  return t;
}

// Full pipeline under dilated masks, scored on X_r.
template <class T, class Block>
SweepTable run_mask_sweep(QuadNet<T, Block>& q, const std::vector<Sample>& samples, const std::vector<int>& kernels,
                          std::string label = {}) {
  NoGradGuard ng;
  const FanBeamGeometry& g = q.geometry;
  SweepTable t{label.empty() ? sino_mode_name(q.sfr.mode) : label, {}};
  for (const auto& s : samples) check_nesting(s, g, kernels);
  for (int k : kernels) {
    SweepRow row{k};
    std::vector<MetricReport> reps;
    for (const auto& s0 : samples) {
      const Sample s = with_dilated_mask(s0, g, k);
      const TrainSet<T> one = to_train_set<T>({s}, g);
      auto o = q.forward(batch_of(one, {0}), BnMode::eval);
      Tensor<T> spliced = mul(o.s_r, one.trace) + mul(one.s_mc, affine(one.trace, T(-1), T(1)));
      row.sino_rmse += rmse(plane(spliced, 0), s.s_gt);
      reps.push_back(metric_report(hu_from_normalized(plane(o.x_r, 0)), hu_of_mu(s.x_gt)));
    }
    row.sino_rmse /= samples.size();
    const MeanReport m = mean_of(reps);
    row.image_rmse = m.rmse;
    row.psnr = m.psnr;
    row.ssim = m.ssim;
    t.rows.push_back(row);
  }
  return t;
}

// Kernel index draws for augmentation, uniform over `kernels`.
inline std::vector<int> dilation_choices(std::size_t n, const std::vector<int>& kernels, std::uint64_t seed) {
  if (kernels.empty()) throw Error("augment_with_dilation: no kernels");
  std::mt19937_64 rng(splitmix64(seed ^ 0xda7aa06ull));
  std::uniform_int_distribution<std::size_t> pick(0, kernels.size() - 1);
  std::vector<int> out(n);
  for (auto& k : out) k = kernels[pick(rng)];
  return out;
}

// Each sample's mask, trace and projection replaced by a dilation with a
// kernel drawn from `kernels`. `chosen` receives the draws.
inline std::vector<Sample> augment_with_dilation(const std::vector<Sample>& samples, const FanBeamGeometry& g,
                                                 const std::vector<int>& kernels, std::uint64_t seed,
                                                 std::vector<int>* chosen = nullptr) {
  const std::vector<int> ks = dilation_choices(samples.size(), kernels, seed);
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out.push_back(with_dilated_mask(samples[i], g, ks[i]));
  if (chosen) *chosen = ks;
  return out;
}

// CSV in the layout of a degradation table: one line per model and metric,
// one column per kernel, then mean and std.
inline void write_sweep_csv(std::ostream& os, const std::vector<SweepTable>& tables, bool header = true) {
  if (tables.empty()) return;
  if (header) {
    os << "model,metric";
    for (const auto& r : tables[0].rows) os << ",k" << r.kernel;
    os << ",mean,std\n";
  }
  const std::pair<const char*, double SweepRow::*> metrics[] = {
      {"sino_rmse", &SweepRow::sino_rmse}, {"image_rmse", &SweepRow::image_rmse}, {"psnr", &SweepRow::psnr},
      {"ssim", &SweepRow::ssim}};
  char buf[64];
  for (const auto& t : tables) {
    for (const auto& [name, f] : metrics) {
      os << t.label << "," << name;
      for (const auto& r : t.rows) {
        std::snprintf(buf, sizeof buf, ",%.6g", r.*f);
        os << buf;
      }
      const MeanStd ms = t.summary(f);
      std::snprintf(buf, sizeof buf, ",%.6g,%.6g\n", ms.mean, ms.std);
      os << buf;
    }
  }
}

}  // namespace quadnet

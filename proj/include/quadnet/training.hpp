#pragma once

// Dataset tensors, training loops and evaluation of the full pipeline.

#include <chrono>
#include <functional>
#include <numeric>

#include "quadnet/classical_mar.hpp"
#include "quadnet/metrics.hpp"
#include "quadnet/physics.hpp"

namespace quadnet {

// A dataset stacked into (N, 1, ...) tensors.
template <class T>
struct TrainSet {
  FanBeamGeometry geometry;
  Tensor<T> s_mc, trace, mask_proj, s_gt;  // (N, 1, Nd, Nv)
  Tensor<T> x_gt;                          // (N, 1, n, n) normalized
  std::vector<int> metal_bins, indices;

  int size() const { return s_mc.size() ? s_mc.dim(0) : 0; }
};

namespace train_detail {

template <class T>
Tensor<T> stack(const std::vector<const TensorD*>& planes) {
  if (planes.empty()) throw Error("stack: no samples");
  const Shape s = planes[0]->shape();
  if (s.size() != 2) throw Error("stack: expected 2-D planes, got " + to_string(s));
  Tensor<T> out({static_cast<int>(planes.size()), 1, s[0], s[1]});
  auto o = out.mutable_data();
  std::size_t k = 0;
  for (const TensorD* p : planes) {
    if (p->shape() != s) throw Error("stack: samples have different shapes");
    for (double v : p->data()) o[k++] = static_cast<T>(v);
  }
  return out;
}

}  // namespace train_detail

template <class T>
TrainSet<T> to_train_set(const std::vector<Sample>& samples, const FanBeamGeometry& g) {
  std::vector<const TensorD*> smc, tr, mp, sgt, xgt;
  TrainSet<T> t;
  t.geometry = g;
  for (const auto& s : samples) {
    smc.push_back(&s.s_mc);
    tr.push_back(&s.trace);
    mp.push_back(&s.mask_proj);
    sgt.push_back(&s.s_gt);
    xgt.push_back(&s.x_gt);
    t.metal_bins.push_back(s.metal_bin);
    t.indices.push_back(s.index);
  }
  t.s_mc = train_detail::stack<T>(smc);
  t.trace = train_detail::stack<T>(tr);
  t.mask_proj = train_detail::stack<T>(mp);
  t.s_gt = train_detail::stack<T>(sgt);
  t.x_gt = normalized_from_mu(train_detail::stack<T>(xgt));
  if (t.s_mc.dim(2) != g.num_detectors || t.s_mc.dim(3) != g.num_views || t.x_gt.dim(2) != g.image_size) {
    throw Error("to_train_set: samples do not match the geometry");
  }
  return t;
}

// Rows `idx` of a (N, ...) tensor, without autodiff.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& idx) {
  Shape s = x.shape();
  const std::size_t row = x.size() / s[0];
  s[0] = static_cast<int>(idx.size());
  Tensor<T> out(s);
  auto o = out.mutable_data();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= x.dim(0)) throw Error("gather_rows: index out of range");
    std::copy_n(x.data().begin() + idx[k] * row, row, o.begin() + k * row);
  }
  return out;
}

template <class T>
QuadNetBatch<T> batch_of(const TrainSet<T>& t, const std::vector<int>& idx) {
  return {gather_rows(t.s_mc, idx), gather_rows(t.trace, idx), gather_rows(t.mask_proj, idx), gather_rows(t.s_gt, idx),
          gather_rows(t.x_gt, idx)};
}

// Reshuffled every epoch from a seeded generator.
class BatchSampler {
 public:
  BatchSampler(int n, int batch, std::uint64_t seed) : n_(n), batch_(std::min(batch, n)), rng_(seed) {
    if (n < 1 || batch < 1) throw Error("BatchSampler: empty dataset or batch");
  }

  std::vector<int> next() {
    std::vector<int> out;
    while (static_cast<int>(out.size()) < batch_) {
      if (pos_ == order_.size()) {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), 0);
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  int n_, batch_;
  std::mt19937_64 rng_;
  std::vector<int> order_;
  std::size_t pos_ = 0;
};

struct TrainOptions {
  int steps = 2000;
  int batch_size = 4;
  double lr = 5e-4, beta1 = 0.5, beta2 = 0.999;
  std::uint64_t seed = 0;
  int log_every = 100;
  std::function<void(int step, double loss)> on_log;
};

struct TrainHistory {
  std::vector<std::pair<int, double>> losses;  // (step, mean loss since last log)
  double seconds = 0;
};

namespace train_detail {

template <class T, class StepFn>
TrainHistory run(Collector<T>& params, const TrainOptions& opt, int n, StepFn&& loss_of) {
  Adam<T> adam(opt.lr, opt.beta1, opt.beta2);
  BatchSampler sampler(n, opt.batch_size, splitmix64(opt.seed ^ 0xba7c4ull));
  TrainHistory h;
  const auto t0 = std::chrono::steady_clock::now();
  double acc = 0;
  int acc_n = 0;
  for (int step = 1; step <= opt.steps; ++step) {
    adam.zero_grad(params);
    Tensor<T> loss = loss_of(sampler.next());
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      throw Error("training diverged at step " + std::to_string(step));
    }
    loss.backward();
    adam.step(params);
    acc += loss.item();
    ++acc_n;
    if (step % std::max(1, opt.log_every) == 0 || step == opt.steps) {
      h.losses.emplace_back(step, acc / acc_n);
      if (opt.on_log) opt.on_log(step, acc / acc_n);
      acc = 0;
      acc_n = 0;
    }
  }
  h.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return h;
}

}  // namespace train_detail

// Sinogram network alone, on loss_sfr.
template <class T, class Block>
TrainHistory train_sfr(SinoNet<T, Block>& net, const TrainSet<T>& data, const TrainOptions& opt) {
  auto params = collect_all(net);
  return train_detail::run(params, opt, data.size(), [&](const std::vector<int>& idx) {
    const QuadNetBatch<T> b = batch_of(data, idx);
    const Tensor<T>& aux = net.mode == SinoMode::enhance_projection ? b.mask_proj : b.trace;
    Tensor<T> s_r = sfr_forward(net, b.s_mc, b.trace, aux, BnMode::train);
    Tensor<T> x_s = replace_and_recon(s_r, b.s_mc, b.trace, data.geometry);
    return loss_sfr(s_r, b.s_gt, x_s, b.x_gt);
  });
}

// All three networks jointly, on loss_total.
template <class T, class Block>
TrainHistory train_quadnet(QuadNet<T, Block>& q, const TrainSet<T>& data, const TrainOptions& opt,
                           const IfrLossConfig& cfg = {}) {
  auto params = collect_all(q);
  const FeatureExtractor<T> phi(0);
  return train_detail::run(params, opt, data.size(), [&](const std::vector<int>& idx) {
    const QuadNetBatch<T> b = batch_of(data, idx);
    auto o = q.forward(b, BnMode::train);
    return loss_total(o.s_r, b.s_gt, o.x_s, o.x_u, o.x_r, b.x_gt, phi, cfg).total;
  });
}

// ---------------------------------------------------------------------------
// Evaluation

template <class T>
TensorD plane(const Tensor<T>& x, int i) {
  const int H = x.dim(2), W = x.dim(3);
  TensorD out({H, W});
  auto o = out.mutable_data();
  const std::size_t off = static_cast<std::size_t>(i) * x.size() / x.dim(0);
  for (std::size_t k = 0; k < o.size(); ++k) o[k] = static_cast<double>(x[off + k]);
  return out;
}

struct PipelineScores {
  std::vector<MetricReport> x_mc, x_s, x_u, x_r;
  std::vector<double> sino_rmse;  // S_r vs S_gt over the whole sinogram
};

// Runs the pipeline in eval mode, one sample at a time.
template <class T, class Block>
PipelineScores evaluate_quadnet(QuadNet<T, Block>& q, const TrainSet<T>& data) {
  NoGradGuard ng;
  PipelineScores sc;
  for (int i = 0; i < data.size(); ++i) {
    auto o = q.forward(batch_of(data, {i}), BnMode::eval);
    const TensorD gt = hu_from_normalized(plane(data.x_gt, i));
    sc.x_mc.push_back(metric_report(hu_from_normalized(plane(o.x_mc, 0)), gt));
    sc.x_s.push_back(metric_report(hu_from_normalized(plane(o.x_s, 0)), gt));
    sc.x_u.push_back(metric_report(hu_from_normalized(plane(o.x_u, 0)), gt));
    sc.x_r.push_back(metric_report(hu_from_normalized(plane(o.x_r, 0)), gt));
    sc.sino_rmse.push_back(rmse(plane(o.s_r, 0), plane(data.s_gt, i)));
  }
  return sc;
}

// RMSE of S_r against S_gt per sample, eval mode.
template <class T, class Block>
std::vector<double> sinogram_rmse(SinoNet<T, Block>& net, const TrainSet<T>& data) {
  NoGradGuard ng;
  std::vector<double> out;
  for (int i = 0; i < data.size(); ++i) {
    const QuadNetBatch<T> b = batch_of(data, {i});
    const Tensor<T>& aux = net.mode == SinoMode::enhance_projection ? b.mask_proj : b.trace;
    out.push_back(rmse(plane(sfr_forward(net, b.s_mc, b.trace, aux, BnMode::eval), 0), plane(b.s_gt, 0)));
  }
  return out;
}

// Classical baselines reconstructed and scored in HU.
enum class Baseline { none, li, nmar, fsnmar };

inline Baseline baseline_kind(const std::string& s) {
  if (s == "none") return Baseline::none;
  if (s == "li") return Baseline::li;
  if (s == "nmar") return Baseline::nmar;
  if (s == "fsnmar") return Baseline::fsnmar;
  throw Error("unknown baseline '" + s + "'");
}

inline TensorD hu_of_mu(const TensorD& mu) {
  TensorD out(mu.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 1000.0 * (mu[i] - kMuWater) / kMuWater;
  return out;
}

// Reconstruction (attenuation units) of one sample by a classical method.
inline TensorD baseline_reconstruction(const Sample& s, const FanBeamGeometry& g, Baseline b, Warnings* w = nullptr) {
  auto recon = [&](const TensorD& sino) { return fbp(Sinogram<double>{g, sino}, g).values; };
  switch (b) {
    case Baseline::none: return recon(s.s_mc);
    case Baseline::li: return recon(li_complete(s.s_mc, s.trace, w));
    case Baseline::nmar: return recon(nmar(s.s_mc, s.trace, g, {}, w));
    case Baseline::fsnmar: {
      const TensorD x_nmar = recon(nmar(s.s_mc, s.trace, g, {}, w));
      const TensorD x_mc = recon(s.s_mc);
      return fsnmar(CtImage<double>{x_nmar, Units::mu, g.pixel_spacing}, CtImage<double>{x_mc, Units::mu, g.pixel_spacing},
                    s.mask)
          .values;
    }
  }
  throw Error("baseline: unhandled kind");
}

inline std::vector<MetricReport> evaluate_baseline(const std::vector<Sample>& samples, const FanBeamGeometry& g, Baseline b,
                                                   Warnings* w = nullptr) {
  std::vector<MetricReport> out;
  for (const auto& s : samples) out.push_back(metric_report(hu_of_mu(baseline_reconstruction(s, g, b, w)), hu_of_mu(s.x_gt)));
  return out;
}

}  // namespace quadnet

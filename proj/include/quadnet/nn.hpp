#pragma once

// Layers with named parameters, the Adam optimizer and checkpoint I/O.
//
// Modules expose collect(Collector&, prefix), which lists every trainable
// tensor and every BN running buffer under a dotted name. Optimizer state and
// checkpoints key off those names.

#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "quadnet/batchnorm.hpp"
#include "quadnet/conv.hpp"
#include "quadnet/qnt_io.hpp"

namespace quadnet {

template <class T>
struct Collector {
  std::vector<std::pair<std::string, Tensor<T>*>> params;
  std::vector<std::pair<std::string, std::vector<T>*>> buffers;

  void param(const std::string& name, Tensor<T>& t) { params.emplace_back(name, &t); }
  void buffer(const std::string& name, std::vector<T>& v) { buffers.emplace_back(name, &v); }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t->size();
    return n;
  }
};

template <class Module>
auto collect_all(Module& m, const std::string& prefix = "") {
  Collector<typename Module::value_type> c;
  m.collect(c, prefix);
  return c;
}

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

// Kaiming-normal init with fan-in scaling.
template <class T>
Tensor<T> kaiming(Shape s, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
  Tensor<T> t(std::move(s));
  for (auto& v : t.mutable_data()) v = static_cast<T>(d(rng));
  t.requires_grad(true);
  return t;
}

template <class T>
Tensor<T> trainable(Shape s, T fill) {
  Tensor<T> t(std::move(s), fill);
  t.requires_grad(true);
  return t;
}

template <class T>
struct Conv {
  using value_type = T;
  Tensor<T> weight, bias;
  int stride = 1, padding = 0;

  Conv() = default;
  // "same" padding for odd k; zero_init gives an all-zero layer.
  Conv(int cin, int cout, int k, std::mt19937_64& rng, int stride_ = 1, bool with_bias = true, bool zero_init = false)
      : stride(stride_), padding(k / 2) {
    weight = zero_init ? trainable<T>({cout, cin, k, k}, T(0)) : kaiming<T>({cout, cin, k, k}, cin * k * k, rng);
    if (with_bias) bias = trainable<T>({cout}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

  void collect(Collector<T>& c, const std::string& p) {
    c.param(join_name(p, "weight"), weight);
    if (bias.size()) c.param(join_name(p, "bias"), bias);
  }
};

template <class T>
struct BatchNorm {
  using value_type = T;
  Tensor<T> gamma, beta;
  BatchNormState<T> state;

  BatchNorm() = default;
  explicit BatchNorm(int c) : gamma(trainable<T>({c}, T(1))), beta(trainable<T>({c}, T(0))), state(c) {}

  Tensor<T> operator()(const Tensor<T>& x, BnMode mode) { return batchnorm2d(x, gamma, beta, state, mode); }

  void collect(Collector<T>& c, const std::string& p) {
    c.param(join_name(p, "gamma"), gamma);
    c.param(join_name(p, "beta"), beta);
    c.buffer(join_name(p, "running_mean"), state.running_mean);
    c.buffer(join_name(p, "running_var"), state.running_var);
  }
};

// ReLU(BN(Conv(x))); the conv has no bias since BN removes it anyway.
template <class T>
struct ConvBnRelu {
  using value_type = T;
  Conv<T> conv;
  BatchNorm<T> bn;

  ConvBnRelu() = default;
  ConvBnRelu(int cin, int cout, int k, std::mt19937_64& rng, int stride = 1)
      : conv(cin, cout, k, rng, stride, false), bn(cout) {}

  Tensor<T> operator()(const Tensor<T>& x, BnMode mode) { return relu(bn(conv(x), mode)); }

  void collect(Collector<T>& c, const std::string& p) {
    conv.collect(c, join_name(p, "conv"));
    bn.collect(c, join_name(p, "bn"));
  }
};

// ---------------------------------------------------------------------------
// Adam

template <class T>
class Adam {
 public:
  double lr = 5e-4, beta1 = 0.5, beta2 = 0.999, eps = 1e-8;
  long long step_count = 0;

  Adam() = default;
  Adam(double lr_, double b1, double b2) : lr(lr_), beta1(b1), beta2(b2) {}

  void step(Collector<T>& c) {
    ++step_count;
    const double bc1 = 1 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1 - std::pow(beta2, static_cast<double>(step_count));
    for (auto& [name, t] : c.params) {
      if (!t->needs_grad() || t->node()->grad.empty()) continue;
      auto& st = state_[name];
      if (st.m.size() != t->size()) {
        st.m.assign(t->size(), T(0));
        st.v.assign(t->size(), T(0));
      }
      const auto& g = t->node()->grad;
      auto w = t->mutable_data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        st.m[i] = static_cast<T>(beta1 * st.m[i] + (1 - beta1) * g[i]);
        st.v[i] = static_cast<T>(beta2 * st.v[i] + (1 - beta2) * g[i] * g[i]);
        w[i] -= static_cast<T>(lr * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + eps));
      }
    }
  }

  void zero_grad(Collector<T>& c) {
    for (auto& [name, t] : c.params) t->zero_grad();
  }

  struct Moments {
    std::vector<T> m, v;
  };
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }

 private:
  std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// Checkpoints: a directory with index.txt and one QNT1 file per tensor.
//
// index.txt:
//   meta <key> <value>
//   param <name> <file>
//   buffer <name> <file>
//   adam_m <name> <file> / adam_v <name> <file>

struct CheckpointMeta {
  std::map<std::string, std::string> values;
};

namespace ckpt_detail {

inline std::string file_for(const std::string& kind, std::size_t i) { return kind + "_" + std::to_string(i) + ".qnt"; }

}  // namespace ckpt_detail

template <class T>
void save_checkpoint(const std::filesystem::path& dir, Collector<T>& c, const Adam<T>* adam, const CheckpointMeta& meta) {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".tmp", old = dir.string() + ".old";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  std::ofstream index(tmp / "index.txt");
  for (const auto& [k, v] : meta.values) index << "meta " << k << " " << v << "\n";
  std::size_t n = 0;
  for (auto& [name, t] : c.params) {
    const auto f = ckpt_detail::file_for("p", n++);
    save_qnt(tmp / f, *t);
    index << "param " << name << " " << f << "\n";
  }
  for (auto& [name, b] : c.buffers) {
    const auto f = ckpt_detail::file_for("b", n++);
    save_qnt(tmp / f, Tensor<T>({static_cast<int>(b->size())}, *b));
    index << "buffer " << name << " " << f << "\n";
  }
  if (adam) {
    index << "meta adam_step " << adam->step_count << "\n";
    for (const auto& [name, st] : adam->state()) {
      const auto fm = ckpt_detail::file_for("m", n), fv = ckpt_detail::file_for("v", n);
      ++n;
      save_qnt(tmp / fm, Tensor<T>({static_cast<int>(st.m.size())}, st.m));
      save_qnt(tmp / fv, Tensor<T>({static_cast<int>(st.v.size())}, st.v));
      index << "adam_m " << name << " " << fm << "\n" << "adam_v " << name << " " << fv << "\n";
    }
  }
  index.close();
  if (!index) throw Error("checkpoint: failed writing index in " + tmp.string());
  fs::remove_all(old);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

// Loads into an already constructed network of the same architecture. Every
// parameter and buffer must be present with a matching size.
template <class T>
CheckpointMeta load_checkpoint(const std::filesystem::path& dir, Collector<T>& c, Adam<T>* adam = nullptr) {
  std::ifstream index(dir / "index.txt");
  if (!index) throw Error("checkpoint: no index.txt in " + dir.string());
  CheckpointMeta meta;
  std::map<std::string, std::string> params, buffers, am, av;
  std::string kind, name, value;
  while (index >> kind >> name >> value) {
    if (kind == "meta") meta.values[name] = value;
    else if (kind == "param") params[name] = value;
    else if (kind == "buffer") buffers[name] = value;
    else if (kind == "adam_m") am[name] = value;
    else if (kind == "adam_v") av[name] = value;
    else throw Error("checkpoint: unknown index entry '" + kind + "'");
  }
  for (auto& [pname, t] : c.params) {
    auto it = params.find(pname);
    if (it == params.end()) throw Error("checkpoint: missing parameter " + pname);
    auto loaded = load_qnt<T>(dir / it->second);
    if (loaded.shape() != t->shape()) {
      throw Error("checkpoint: parameter " + pname + " has shape " + to_string(loaded.shape()) + ", expected " +
                  to_string(t->shape()));
    }
    std::copy(loaded.data().begin(), loaded.data().end(), t->mutable_data().begin());
  }
  for (auto& [bname, b] : c.buffers) {
    auto it = buffers.find(bname);
    if (it == buffers.end()) throw Error("checkpoint: missing buffer " + bname);
    auto loaded = load_qnt<T>(dir / it->second);
    if (loaded.size() != b->size()) throw Error("checkpoint: buffer " + bname + " has wrong length");
    std::copy(loaded.data().begin(), loaded.data().end(), b->begin());
  }
  if (adam) {
    adam->state().clear();
    for (const auto& [mname, f] : am) {
      auto& st = adam->state()[mname];
      st.m = load_qnt<T>(dir / f).values();
      st.v = load_qnt<T>(dir / av.at(mname)).values();
    }
    if (meta.values.count("adam_step")) adam->step_count = std::stoll(meta.values["adam_step"]);
  }
  return meta;
}

}  // namespace quadnet

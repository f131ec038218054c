#pragma once

#include "quadnet/ops.hpp"

namespace quadnet {

template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(int channels = 0)
      : running_mean(static_cast<std::size_t>(channels), T(0)),
        running_var(static_cast<std::size_t>(channels), T(1)) {}
};

enum class BnMode { train, eval };

// Per-channel normalization of a (B, C, H, W) tensor. Train mode uses batch
// statistics (biased variance) and folds them into the running estimates with
// the unbiased variance; eval mode uses the running estimates.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, BnMode mode) {
  detail::expect_4d(x.shape(), "batchnorm2d");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (gamma.size() != static_cast<std::size_t>(C) || beta.size() != static_cast<std::size_t>(C) ||
      state.running_mean.size() != static_cast<std::size_t>(C)) {
    throw Error("batchnorm2d: parameter length does not match channels of " + to_string(x.shape()));
  }
  const std::size_t N = static_cast<std::size_t>(B) * plane;
  std::vector<T> mean(C), inv_std(C);
  if (mode == BnMode::train) {
    for (int c = 0; c < C; ++c) {
      T s = 0;
      for (int b = 0; b < B; ++b) {
        const T* p = x.data().data() + (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const T mu = s / static_cast<T>(N);
      T v = 0;
      for (int b = 0; b < B; ++b) {
        const T* p = x.data().data() + (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      v /= static_cast<T>(N);
      mean[c] = mu;
      inv_std[c] = T(1) / std::sqrt(v + state.eps);
      const T unbiased = N > 1 ? v * static_cast<T>(N) / static_cast<T>(N - 1) : v;
      state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var[c] + state.eps);
    }
  }
  std::vector<T> xhat(x.size()), out(x.size());
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(b) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[off + i] = (x[off + i] - mean[c]) * inv_std[c];
        out[off + i] = gamma[c] * xhat[off + i] + beta[c];
      }
    }
  }
  const bool train = mode == BnMode::train;
  return record<T>(x.shape(), std::move(out), {&x, &gamma, &beta},
                   [xhat = std::move(xhat), inv_std, g = gamma.detach(), B, C, plane, N,
                    train](detail::Node<T>& self) {
                     T* gx = self.parent_grad(0);
                     T* gg = self.parent_grad(1);
                     T* gbeta = self.parent_grad(2);
                     const T* go = self.grad.data();
                     for (int c = 0; c < C; ++c) {
                       T sg = 0, sgx = 0;
                       for (int b = 0; b < B; ++b) {
                         const std::size_t off = (static_cast<std::size_t>(b) * C + c) * plane;
                         for (std::size_t i = 0; i < plane; ++i) {
                           sg += go[off + i];
                           sgx += go[off + i] * xhat[off + i];
                         }
                       }
                       if (gbeta) gbeta[c] += sg;
                       if (gg) gg[c] += sgx;
                       if (!gx) continue;
                       const T k = g[c] * inv_std[c];
                       const T mg = sg / static_cast<T>(N), mgx = sgx / static_cast<T>(N);
                       for (int b = 0; b < B; ++b) {
                         const std::size_t off = (static_cast<std::size_t>(b) * C + c) * plane;
                         for (std::size_t i = 0; i < plane; ++i) {
                           gx[off + i] += train ? k * (go[off + i] - mg - xhat[off + i] * mgx) : k * go[off + i];
                         }
                       }
                     }
                   });
}

}  // namespace quadnet

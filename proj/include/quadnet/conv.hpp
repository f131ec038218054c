#pragma once

// 2-D cross-correlation with zero padding. Lowered to im2col + GEMM; the
// column buffer is rebuilt in the backward pass instead of being kept alive.

#include <memory>

#include <Eigen/Core>

#include "quadnet/ops.hpp"

namespace quadnet {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvDims {
  int C, H, W, k, stride, pad, Ho, Wo;
  std::size_t K() const { return static_cast<std::size_t>(C) * k * k; }
  std::size_t P() const { return static_cast<std::size_t>(Ho) * Wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) of a kernel tap read inside the image.
inline std::pair<int, int> valid_cols(const ConvDims& d, int kj) {
  const int off = kj - d.pad;
  int lo = off >= 0 ? 0 : (-off + d.stride - 1) / d.stride;
  int hi = d.W - off <= 0 ? 0 : (d.W - off - 1) / d.stride + 1;
  hi = std::min(hi, d.Wo);
  lo = std::min(lo, hi);
  return {lo, hi};
}

template <class T>
void im2col(const T* x, const ConvDims& d, T* col) {
  for (int c = 0; c < d.C; ++c) {
    for (int ki = 0; ki < d.k; ++ki) {
      for (int kj = 0; kj < d.k; ++kj) {
        T* row = col + ((static_cast<std::size_t>(c) * d.k + ki) * d.k + kj) * d.P();
        const auto [lo, hi] = valid_cols(d, kj);
        const int off = kj - d.pad;
        for (int oi = 0; oi < d.Ho; ++oi) {
          const int i = oi * d.stride - d.pad + ki;
          T* dst = row + static_cast<std::size_t>(oi) * d.Wo;
          if (i < 0 || i >= d.H) {
            std::fill_n(dst, d.Wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * d.H + i) * d.W + off;
          std::fill_n(dst, lo, T(0));
          if (d.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int oj = lo; oj < hi; ++oj) dst[oj] = src[oj * d.stride];
          }
          std::fill(dst + hi, dst + d.Wo, T(0));
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvDims& d, T* x) {
  for (int c = 0; c < d.C; ++c) {
    for (int ki = 0; ki < d.k; ++ki) {
      for (int kj = 0; kj < d.k; ++kj) {
        const T* row = col + ((static_cast<std::size_t>(c) * d.k + ki) * d.k + kj) * d.P();
        const auto [lo, hi] = valid_cols(d, kj);
        const int off = kj - d.pad;
        for (int oi = 0; oi < d.Ho; ++oi) {
          const int i = oi * d.stride - d.pad + ki;
          if (i < 0 || i >= d.H) continue;
          const T* src = row + static_cast<std::size_t>(oi) * d.Wo;
          T* dst = x + (static_cast<std::size_t>(c) * d.H + i) * d.W + off;
          if (d.stride == 1) {
            for (int oj = lo; oj < hi; ++oj) dst[oj] += src[oj];
          } else {
            for (int oj = lo; oj < hi; ++oj) dst[oj * d.stride] += src[oj];
          }
        }
      }
    }
  }
}

// Scratch buffer without value-initialization.
template <class T>
struct Scratch {
  std::unique_ptr<T[]> p;
  explicit Scratch(std::size_t n) : p(n ? new T[n] : nullptr) {}
  T* data() { return p.get(); }
};

}  // namespace detail

// x: (B, C_in, H, W); weight: (C_out, C_in, k, k); bias: (C_out) or empty.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride = 1,
                 int padding = 0) {
  if (x.ndim() != 4 || weight.ndim() != 4 || weight.dim(2) != weight.dim(3) || x.dim(1) != weight.dim(1)) {
    throw Error("conv2d: input " + to_string(x.shape()) + " incompatible with weight " +
                to_string(weight.shape()));
  }
  const bool has_bias = bias.size() > 0;
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != weight.dim(0))) {
    throw Error("conv2d: bias " + to_string(bias.shape()) + " does not match weight " +
                to_string(weight.shape()));
  }
  if (stride < 1 || padding < 0) throw Error("conv2d: invalid stride/padding");
  const int B = x.dim(0), Cout = weight.dim(0), k = weight.dim(2);
  detail::ConvDims d{x.dim(1), x.dim(2), x.dim(3), k, stride, padding, 0, 0};
  d.Ho = (d.H + 2 * padding - k) / stride + 1;
  d.Wo = (d.W + 2 * padding - k) / stride + 1;
  if (d.H + 2 * padding < k || d.W + 2 * padding < k) {
    throw Error("conv2d: kernel " + to_string(weight.shape()) + " larger than padded input " +
                to_string(x.shape()));
  }
  const std::size_t K = d.K(), P = d.P(), in_item = static_cast<std::size_t>(d.C) * d.H * d.W;
  std::vector<T> out(static_cast<std::size_t>(B) * Cout * P);
  detail::Scratch<T> col(d.pointwise() ? 0 : K * P);
  detail::CMapMat<T> Wm(weight.data().data(), Cout, K);
  for (int b = 0; b < B; ++b) {
    const T* xb = x.data().data() + b * in_item;
    if (!d.pointwise()) detail::im2col(xb, d, col.data());
    detail::CMapMat<T> C(d.pointwise() ? xb : col.data(), K, P);
    detail::MapMat<T> O(out.data() + static_cast<std::size_t>(b) * Cout * P, Cout, P);
    O.noalias() = Wm * C;
    if (has_bias) {
      for (int o = 0; o < Cout; ++o) O.row(o).array() += bias[o];
    }
  }
  return record<T>(
      Shape{B, Cout, d.Ho, d.Wo}, std::move(out), {&x, &weight, &bias},
      [x = x.detach(), w = weight.detach(), d, B, Cout, K, P, in_item](detail::Node<T>& self) {
        T* gx = self.parent_grad(0);
        T* gw = self.parent_grad(1);
        T* gb = self.parent_grad(2);
        detail::Scratch<T> col(d.pointwise() || !gw ? 0 : K * P), gcol(gx && !d.pointwise() ? K * P : 0);
        detail::CMapMat<T> Wm(w.data().data(), Cout, K);
        for (int b = 0; b < B; ++b) {
          detail::CMapMat<T> G(self.grad.data() + static_cast<std::size_t>(b) * Cout * P, Cout, P);
          const T* xb = x.data().data() + b * in_item;
          if (gw) {
            if (!d.pointwise()) detail::im2col(xb, d, col.data());
            detail::CMapMat<T> C(d.pointwise() ? xb : col.data(), K, P);
            detail::MapMat<T>(gw, Cout, K).noalias() += G * C.transpose();
          }
          if (gb) {
            // plain loop: Eigen's vectorized sum peels by address, so its
            // result would depend on buffer alignment
            for (int o = 0; o < Cout; ++o) {
              const T* g = self.grad.data() + (static_cast<std::size_t>(b) * Cout + o) * P;
              double acc = 0;
              for (int k = 0; k < P; ++k) acc += g[k];
              gb[o] += static_cast<T>(acc);
            }
          }
          if (gx) {
            if (d.pointwise()) {
              detail::MapMat<T>(gx + b * in_item, K, P).noalias() += Wm.transpose() * G;
            } else {
              detail::MapMat<T>(gcol.data(), K, P).noalias() = Wm.transpose() * G;
              detail::col2im_add(gcol.data(), d, gx + b * in_item);
            }
          }
        }
      });
}

}  // namespace quadnet

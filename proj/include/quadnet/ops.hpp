#pragma once

// Elementwise, structural and reduction ops with gradients. Image tensors use
// the (B, C, H, W) layout; binary ops broadcast only over the batch axis.

#include "quadnet/tensor.hpp"

namespace quadnet {

namespace detail {

inline void expect_4d(const Shape& s, const char* op) {
  if (s.size() != 4) throw Error(std::string(op) + ": expected (B,C,H,W), got " + to_string(s));
}

// Right operand either matches `a` or matches it with batch extent 1.
inline bool batch_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return false;
  if (!a.empty() && a.size() == b.size() && b[0] == 1 &&
      std::equal(a.begin() + 1, a.end(), b.begin() + 1)) {
    return true;
  }
  throw Error(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <class T, class Fwd, class Da, class Db>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd f, Da da, Db db) {
  const bool bc = batch_broadcast(a.shape(), b.shape(), name);
  const std::size_t n = a.size(), m = b.size();
  std::vector<T> out(n);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[bc ? i % m : i]);
  return record<T>(a.shape(), std::move(out), {&a, &b},
                   [a = a.detach(), b = b.detach(), bc, n, m, da, db](Node<T>& self) {
                     auto av = a.data();
                     auto bv = b.data();
                     const T* g = self.grad.data();
                     if (T* ga = self.parent_grad(0)) {
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * da(av[i], bv[bc ? i % m : i]);
                     }
                     if (T* gb = self.parent_grad(1)) {
                       for (std::size_t i = 0; i < n; ++i) {
                         gb[bc ? i % m : i] += g[i] * db(av[i], bv[bc ? i % m : i]);
                       }
                     }
                   });
}

template <class T, class Fwd, class Dx>
Tensor<T> unary(const Tensor<T>& x, Fwd f, Dx dx) {
  const std::size_t n = x.size();
  std::vector<T> out(n);
  auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(xv[i]);
  return record<T>(x.shape(), std::move(out), {&x}, [x = x.detach(), n, dx](Node<T>& self) {
    auto xv = x.data();
    const T* g = self.grad.data();
    T* gx = self.parent_grad(0);
    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * dx(xv[i]);
  });
}

}  // namespace detail

using detail::Node;

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// scale * x + shift
template <class T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift = T(0)) {
  return detail::unary(
      x, [=](T v) { return scale * v + shift; }, [=](T) { return scale; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) { return affine(x, s, T(0)); }

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

// Pass-through gradient on [lo, hi], zero outside.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, [=](T v) { return std::clamp(v, lo, hi); },
      [=](T v) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// sqrt(a^2 + b^2) with gradient 0 where the magnitude vanishes.
template <class T>
Tensor<T> hypot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw Error("hypot: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  return detail::binary(
      a, b, "hypot", [](T x, T y) { return std::sqrt(x * x + y * y); },
      [](T x, T y) {
        T r = std::sqrt(x * x + y * y);
        return r > T(0) ? x / r : T(0);
      },
      [](T x, T y) {
        T r = std::sqrt(x * x + y * y);
        return r > T(0) ? y / r : T(0);
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  const std::size_t n = x.size();
  return record<T>(Shape{}, {s}, {&x}, [n](Node<T>& self) {
    T g = self.grad[0];
    T* gx = self.parent_grad(0);
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw Error("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

namespace detail {

// mean over elements of phi(a - b); dphi is the derivative w.r.t. the difference.
template <class T, class Phi, class DPhi>
Tensor<T> diff_reduce(const Tensor<T>& a, const Tensor<T>& b, const char* name, Phi phi, DPhi dphi) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(name) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                to_string(b.shape()));
  }
  const std::size_t n = a.size();
  if (n == 0) throw Error(std::string(name) + ": empty input");
  auto av = a.data();
  auto bv = b.data();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += phi(av[i] - bv[i]);
  s /= static_cast<T>(n);
  return record<T>(Shape{}, {s}, {&a, &b}, [a = a.detach(), b = b.detach(), n, dphi](Node<T>& self) {
    auto av = a.data();
    auto bv = b.data();
    const T g = self.grad[0] / static_cast<T>(n);
    T* ga = self.parent_grad(0);
    T* gb = self.parent_grad(1);
    for (std::size_t i = 0; i < n; ++i) {
      T d = g * dphi(av[i] - bv[i]);
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

}  // namespace detail

// Mean absolute difference.
template <class T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::diff_reduce(
      a, b, "l1_loss", [](T d) { return std::abs(d); },
      [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::diff_reduce(
      a, b, "mse_loss", [](T d) { return d * d; }, [](T d) { return T(2) * d; });
}

// Huber-style smooth L1 with transition point `beta`: 0.5 d^2 / beta inside,
// |d| - 0.5 beta outside.
template <class T>
Tensor<T> smooth_l1_loss(const Tensor<T>& a, const Tensor<T>& b, T beta = T(1)) {
  return detail::diff_reduce(
      a, b, "smooth_l1_loss",
      [beta](T d) {
        T ad = std::abs(d);
        return ad < beta ? T(0.5) * d * d / beta : ad - T(0.5) * beta;
      },
      [beta](T d) {
        if (std::abs(d) < beta) return d / beta;
        return d > T(0) ? T(1) : T(-1);
      });
}

// Concatenate (B, Ci, H, W) tensors along channels.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw Error("concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  detail::expect_4d(s0, "concat_channels");
  int ctot = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    detail::expect_4d(s, "concat_channels");
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw Error("concat_channels: shape mismatch " + to_string(s0) + " vs " + to_string(s));
    }
    ctot += s[1];
  }
  const int B = s0[0];
  const std::size_t plane = static_cast<std::size_t>(s0[2]) * s0[3];
  std::vector<T> out(static_cast<std::size_t>(B) * ctot * plane);
  std::vector<std::size_t> offsets;
  std::size_t coff = 0;
  for (const auto& x : xs) {
    offsets.push_back(coff);
    const std::size_t cx = static_cast<std::size_t>(x.dim(1)) * plane;
    for (int b = 0; b < B; ++b) {
      std::copy_n(x.data().begin() + b * cx, cx, out.begin() + b * ctot * plane + coff);
    }
    coff += cx;
  }
  std::vector<const Tensor<T>*> ins;
  std::vector<std::size_t> sizes;
  for (const auto& x : xs) {
    ins.push_back(&x);
    sizes.push_back(static_cast<std::size_t>(x.dim(1)) * plane);
  }
  const std::size_t row = static_cast<std::size_t>(ctot) * plane;
  return record_many<T>(Shape{B, ctot, s0[2], s0[3]}, std::move(out), ins,
                        [offsets, sizes, B, row](Node<T>& self) {
                          for (std::size_t k = 0; k < offsets.size(); ++k) {
                            T* gx = self.parent_grad(k);
                            if (!gx) continue;
                            for (int b = 0; b < B; ++b) {
                              const T* g = self.grad.data() + b * row + offsets[k];
                              for (std::size_t i = 0; i < sizes[k]; ++i) gx[b * sizes[k] + i] += g[i];
                            }
                          }
                        });
}

// Channels [begin, end) of a (B, C, H, W) tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end) {
  detail::expect_4d(x.shape(), "slice_channels");
  const int B = x.dim(0), C = x.dim(1);
  if (begin < 0 || end > C || begin >= end) {
    throw Error("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                ") invalid for " + to_string(x.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t len = (end - begin) * plane, row = C * plane, off = begin * plane;
  std::vector<T> out(B * len);
  for (int b = 0; b < B; ++b) std::copy_n(x.data().begin() + b * row + off, len, out.begin() + b * len);
  return record<T>(Shape{B, end - begin, x.dim(2), x.dim(3)}, std::move(out), {&x},
                   [B, len, row, off](Node<T>& self) {
                     T* gx = self.parent_grad(0);
                     for (int b = 0; b < B; ++b) {
                       for (std::size_t i = 0; i < len; ++i) gx[b * row + off + i] += self.grad[b * len + i];
                     }
                   });
}

// Batch items [begin, end).
template <class T>
Tensor<T> slice_batch(const Tensor<T>& x, int begin, int end) {
  if (x.ndim() < 1 || begin < 0 || end > x.dim(0) || begin >= end) {
    throw Error("slice_batch: invalid range for " + to_string(x.shape()));
  }
  const std::size_t item = x.size() / x.dim(0);
  Shape s = x.shape();
  s[0] = end - begin;
  std::vector<T> out(x.data().begin() + begin * item, x.data().begin() + end * item);
  const std::size_t off = begin * item, len = out.size();
  return record<T>(std::move(s), std::move(out), {&x}, [off, len](Node<T>& self) {
    T* gx = self.parent_grad(0);
    for (std::size_t i = 0; i < len; ++i) gx[off + i] += self.grad[i];
  });
}

template <class T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw Error("concat_batch: no inputs");
  Shape s = xs[0].shape();
  int b = 0;
  std::vector<T> out;
  std::vector<const Tensor<T>*> ins;
  std::vector<std::size_t> sizes;
  for (const auto& x : xs) {
    if (x.ndim() != static_cast<int>(s.size()) || !std::equal(s.begin() + 1, s.end(), x.shape().begin() + 1)) {
      throw Error("concat_batch: shape mismatch " + to_string(s) + " vs " + to_string(x.shape()));
    }
    b += x.dim(0);
    out.insert(out.end(), x.data().begin(), x.data().end());
    ins.push_back(&x);
    sizes.push_back(x.size());
  }
  s[0] = b;
  return record_many<T>(std::move(s), std::move(out), ins, [sizes](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (T* gx = self.parent_grad(k)) {
        for (std::size_t i = 0; i < sizes[k]; ++i) gx[i] += self.grad[off + i];
      }
      off += sizes[k];
    }
  });
}

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  detail::expect_4d(x.shape(), "upsample_nearest2x");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int H2 = 2 * H, W2 = 2 * W;
  std::vector<T> out(static_cast<std::size_t>(B) * C * H2 * W2);
  const std::size_t planes = static_cast<std::size_t>(B) * C;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data().data() + p * H * W;
    T* dst = out.data() + p * H2 * W2;
    for (int i = 0; i < H2; ++i) {
      for (int j = 0; j < W2; ++j) dst[i * W2 + j] = src[(i / 2) * W + j / 2];
    }
  }
  return record<T>(Shape{B, C, H2, W2}, std::move(out), {&x}, [planes, H, W](Node<T>& self) {
    T* gx = self.parent_grad(0);
    const int H2 = 2 * H, W2 = 2 * W;
    for (std::size_t p = 0; p < planes; ++p) {
      const T* g = self.grad.data() + p * H2 * W2;
      T* d = gx + p * H * W;
      for (int i = 0; i < H2; ++i) {
        for (int j = 0; j < W2; ++j) d[(i / 2) * W + j / 2] += g[i * W2 + j];
      }
    }
  });
}

// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
template <class T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
  detail::expect_4d(x.shape(), "maxpool2x2");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H / 2, Wo = W / 2;
  if (Ho < 1 || Wo < 1) throw Error("maxpool2x2: input too small " + to_string(x.shape()));
  const std::size_t planes = static_cast<std::size_t>(B) * C;
  std::vector<T> out(planes * Ho * Wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data().data() + p * H * W;
    for (int i = 0; i < Ho; ++i) {
      for (int j = 0; j < Wo; ++j) {
        std::size_t best = (2 * i) * W + 2 * j;
        for (int di = 0; di < 2; ++di) {
          for (int dj = 0; dj < 2; ++dj) {
            std::size_t k = (2 * i + di) * W + 2 * j + dj;
            if (src[k] > src[best]) best = k;
          }
        }
        const std::size_t o = p * Ho * Wo + i * Wo + j;
        out[o] = src[best];
        argmax[o] = p * H * W + best;
      }
    }
  }
  return record<T>(Shape{B, C, Ho, Wo}, std::move(out), {&x}, [argmax](Node<T>& self) {
    T* gx = self.parent_grad(0);
    for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += self.grad[o];
  });
}

namespace detail {
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}
}  // namespace detail

// Reflection padding (edge pixel not repeated) on H and W.
template <class T>
Tensor<T> reflect_pad(const Tensor<T>& x, int top, int bottom, int left, int right) {
  detail::expect_4d(x.shape(), "reflect_pad");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H + top + bottom, Wo = W + left + right;
  const std::size_t planes = static_cast<std::size_t>(B) * C;
  std::vector<std::size_t> src(static_cast<std::size_t>(Ho) * Wo);
  for (int i = 0; i < Ho; ++i) {
    for (int j = 0; j < Wo; ++j) {
      src[i * Wo + j] = detail::reflect_index(i - top, H) * W + detail::reflect_index(j - left, W);
    }
  }
  std::vector<T> out(planes * src.size());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t k = 0; k < src.size(); ++k) out[p * src.size() + k] = x[p * H * W + src[k]];
  }
  const std::size_t in_plane = static_cast<std::size_t>(H) * W;
  return record<T>(Shape{B, C, Ho, Wo}, std::move(out), {&x}, [planes, src, in_plane](Node<T>& self) {
    T* gx = self.parent_grad(0);
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t k = 0; k < src.size(); ++k) gx[p * in_plane + src[k]] += self.grad[p * src.size() + k];
    }
  });
}

// Window [r0, r0+h) x [c0, c0+w) of each plane.
template <class T>
Tensor<T> crop(const Tensor<T>& x, int r0, int c0, int h, int w) {
  detail::expect_4d(x.shape(), "crop");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (r0 < 0 || c0 < 0 || r0 + h > H || c0 + w > W || h < 1 || w < 1) {
    throw Error("crop: window out of range for " + to_string(x.shape()));
  }
  const std::size_t planes = static_cast<std::size_t>(B) * C;
  std::vector<T> out(planes * h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) out[(p * h + i) * w + j] = x[(p * H + r0 + i) * W + c0 + j];
    }
  }
  return record<T>(Shape{B, C, h, w}, std::move(out), {&x}, [=](Node<T>& self) {
    T* gx = self.parent_grad(0);
    for (std::size_t p = 0; p < planes; ++p) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) gx[(p * H + r0 + i) * W + c0 + j] += self.grad[(p * h + i) * w + j];
      }
    }
  });
}

template <class T>
Tensor<T> sum_squares(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v * v;
  return record<T>(Shape{}, {s}, {&x}, [x = x.detach()](Node<T>& self) {
    T* gx = self.parent_grad(0);
    const T g = self.grad[0];
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += T(2) * g * x[i];
  });
}

}  // namespace quadnet

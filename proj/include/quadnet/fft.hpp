#pragma once

// Real 2-D FFT over the last two axes with orthonormal scaling, plus the
// channel-stacking helpers used by the spectral branch of the FFC block.
//
// Spectra are half-spectra along W: Wh = W/2 + 1 bins. Internally a spectrum
// is "packed" as a real (B, 2C, H, Wh) tensor holding the C real planes
// followed by the C imaginary planes.

#include <complex>
#include <map>
#include <mutex>

#include "quadnet/ops.hpp"

namespace quadnet {

namespace fft {

inline bool is_pow2(std::size_t n) { return n && !(n & (n - 1)); }

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Twiddles exp(-2 pi i k / n), computed in double.
inline const std::vector<std::complex<double>>& twiddles(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::vector<std::complex<double>>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<std::complex<double>> w(n);
  const double pi = std::acos(-1.0);
  for (std::size_t k = 0; k < n; ++k) w[k] = std::polar(1.0, -2.0 * pi * static_cast<double>(k) / n);
  return cache.emplace(n, std::move(w)).first->second;
}

// Unnormalized in-place DFT: sign -1 forward, +1 inverse. Radix-2 for powers
// of two, direct summation otherwise.
template <class T>
void transform(std::complex<T>* a, std::size_t n, int sign) {
  if (n <= 1) return;
  const auto& tw = twiddles(n);
  auto w = [&](std::size_t k) {
    const auto& c = tw[k % n];
    return std::complex<T>(static_cast<T>(c.real()), static_cast<T>(sign < 0 ? c.imag() : -c.imag()));
  };
  if (!is_pow2(n)) {
    std::vector<std::complex<T>> out(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::complex<T> s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const std::complex<T> t = w(j * k);
        s += std::complex<T>(a[j].real() * t.real() - a[j].imag() * t.imag(),
                             a[j].real() * t.imag() + a[j].imag() * t.real());
      }
      out[k] = s;
    }
    std::copy(out.begin(), out.end(), a);
    return;
  }
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t step = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<T> u = a[i + j], b = a[i + j + len / 2], t = w(j * step);
        // Written out: operator* goes through the slow NaN-checking path.
        const std::complex<T> v(b.real() * t.real() - b.imag() * t.imag(), b.real() * t.imag() + b.imag() * t.real());
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
      }
    }
  }
}

inline std::size_t half_width(int W) { return static_cast<std::size_t>(W / 2 + 1); }

// Interior half-spectrum columns carry a Hermitian twin; DC and (even W) the
// Nyquist column do not.
inline bool interior_bin(std::size_t k, int W) {
  return k >= 1 && !(W % 2 == 0 && k == static_cast<std::size_t>(W / 2));
}

// planes x (H, W) real -> planes x (H, Wh) complex, as packed real/imag output
// arrays of size planes*H*Wh each.
template <class T>
void rfft2_raw(const T* x, std::size_t planes, int H, int W, T* re, T* im) {
  const std::size_t Wh = half_width(W);
  const T norm = T(1) / std::sqrt(static_cast<T>(H) * static_cast<T>(W));
  std::vector<std::complex<T>> row(W), col(H), spec(static_cast<std::size_t>(H) * Wh);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = x + p * H * W;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) row[j] = xp[i * W + j];
      transform(row.data(), W, -1);
      for (std::size_t k = 0; k < Wh; ++k) spec[i * Wh + k] = row[k];
    }
    for (std::size_t k = 0; k < Wh; ++k) {
      for (int i = 0; i < H; ++i) col[i] = spec[i * Wh + k];
      transform(col.data(), H, -1);
      for (int i = 0; i < H; ++i) {
        re[p * H * Wh + i * Wh + k] = col[i].real() * norm;
        im[p * H * Wh + i * Wh + k] = col[i].imag() * norm;
      }
    }
  }
}

// Inverse of rfft2_raw: inverse FFT along H, then a real-part synthesis along
// W (imaginary parts of the DC and Nyquist columns do not contribute).
template <class T>
void irfft2_raw(const T* re, const T* im, std::size_t planes, int H, int W, T* x) {
  const std::size_t Wh = half_width(W);
  const T norm = T(1) / std::sqrt(static_cast<T>(H) * static_cast<T>(W));
  std::vector<std::complex<T>> col(H), row(W), spec(static_cast<std::size_t>(H) * Wh);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t k = 0; k < Wh; ++k) {
      for (int i = 0; i < H; ++i) col[i] = {re[p * H * Wh + i * Wh + k], im[p * H * Wh + i * Wh + k]};
      transform(col.data(), H, +1);
      for (int i = 0; i < H; ++i) spec[i * Wh + k] = col[i];
    }
    for (int i = 0; i < H; ++i) {
      for (std::size_t k = 0; k < Wh; ++k) row[k] = spec[i * Wh + k];
      for (std::size_t k = Wh; k < static_cast<std::size_t>(W); ++k) row[k] = std::conj(spec[i * Wh + (W - k)]);
      transform(row.data(), W, +1);
      for (int j = 0; j < W; ++j) x[p * H * W + i * W + j] = row[j].real() * norm;
    }
  }
}

}  // namespace fft

// Packed (B, 2C, H, Wh) spectrum of a (B, C, H, W) tensor.
template <class T>
Tensor<T> rfft2_packed(const Tensor<T>& x) {
  detail::expect_4d(x.shape(), "rfft2");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < 2 || W < 2) throw Error("rfft2: spatial extents must be >= 2, got " + to_string(x.shape()));
  const int Wh = static_cast<int>(fft::half_width(W));
  const std::size_t pl = static_cast<std::size_t>(H) * Wh;
  std::vector<T> out(static_cast<std::size_t>(B) * 2 * C * pl);
  for (int b = 0; b < B; ++b) {
    T* base = out.data() + static_cast<std::size_t>(b) * 2 * C * pl;
    fft::rfft2_raw(x.data().data() + static_cast<std::size_t>(b) * C * H * W, C, H, W, base, base + C * pl);
  }
  // Adjoint of rfft2 = irfft2 with interior columns halved.
  return record<T>(Shape{B, 2 * C, H, Wh}, std::move(out), {&x}, [B, C, H, W, Wh, pl](detail::Node<T>& self) {
    T* gx = self.parent_grad(0);
    std::vector<T> g(self.grad);
    for (std::size_t p = 0; p < static_cast<std::size_t>(B) * 2 * C; ++p) {
      for (int i = 0; i < H; ++i) {
        for (int k = 0; k < Wh; ++k) {
          if (fft::interior_bin(k, W)) g[p * pl + i * Wh + k] *= T(0.5);
        }
      }
    }
    std::vector<T> tmp(static_cast<std::size_t>(C) * H * W);
    for (int b = 0; b < B; ++b) {
      const T* base = g.data() + static_cast<std::size_t>(b) * 2 * C * pl;
      fft::irfft2_raw(base, base + C * pl, C, H, W, tmp.data());
      T* dst = gx + static_cast<std::size_t>(b) * C * H * W;
      for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] += tmp[i];
    }
  });
}

// Inverse of rfft2_packed; `W` is the original spatial width.
template <class T>
Tensor<T> irfft2_packed(const Tensor<T>& s, int W) {
  detail::expect_4d(s.shape(), "irfft2");
  const int B = s.dim(0), C2 = s.dim(1), H = s.dim(2), Wh = s.dim(3);
  if (C2 % 2 != 0) throw Error("irfft2: packed spectrum needs an even channel count, got " + to_string(s.shape()));
  if (W < 2 || H < 2 || static_cast<std::size_t>(Wh) != fft::half_width(W)) {
    throw Error("irfft2: spectrum " + to_string(s.shape()) + " inconsistent with spatial width " +
                std::to_string(W));
  }
  const int C = C2 / 2;
  const std::size_t pl = static_cast<std::size_t>(H) * Wh;
  std::vector<T> out(static_cast<std::size_t>(B) * C * H * W);
  for (int b = 0; b < B; ++b) {
    const T* base = s.data().data() + static_cast<std::size_t>(b) * C2 * pl;
    fft::irfft2_raw(base, base + C * pl, C, H, W, out.data() + static_cast<std::size_t>(b) * C * H * W);
  }
  // Adjoint of irfft2 = rfft2 with interior columns doubled.
  return record<T>(Shape{B, C, H, W}, std::move(out), {&s}, [B, C, H, W, Wh, pl](detail::Node<T>& self) {
    T* gs = self.parent_grad(0);
    std::vector<T> tmp(static_cast<std::size_t>(2) * C * pl);
    for (int b = 0; b < B; ++b) {
      fft::rfft2_raw(self.grad.data() + static_cast<std::size_t>(b) * C * H * W, C, H, W, tmp.data(),
                     tmp.data() + C * pl);
      T* dst = gs + static_cast<std::size_t>(b) * 2 * C * pl;
      for (std::size_t p = 0; p < static_cast<std::size_t>(2) * C; ++p) {
        for (int i = 0; i < H; ++i) {
          for (int k = 0; k < Wh; ++k) {
            const std::size_t idx = p * pl + i * Wh + k;
            dst[idx] += fft::interior_bin(k, W) ? T(2) * tmp[idx] : tmp[idx];
          }
        }
      }
    }
  });
}

template <class T>
struct ComplexSpectrum {
  Tensor<T> real;  // (B, C, H, Wh)
  Tensor<T> imag;  // (B, C, H, Wh)
  int height = 0;  // spatial extents before the transform
  int width = 0;

  int channels() const { return real.dim(1); }
};

// Stacks real and imaginary planes along channels: C -> 2C.
template <class T>
Tensor<T> complex2real(const ComplexSpectrum<T>& s) {
  if (s.real.shape() != s.imag.shape()) {
    throw Error("complex2real: real " + to_string(s.real.shape()) + " vs imag " + to_string(s.imag.shape()));
  }
  return concat_channels<T>({s.real, s.imag});
}

template <class T>
ComplexSpectrum<T> real2complex(const Tensor<T>& x, int height, int width) {
  detail::expect_4d(x.shape(), "real2complex");
  if (x.dim(1) % 2 != 0) {
    throw Error("real2complex: odd channel count in " + to_string(x.shape()));
  }
  if (x.dim(2) != height || static_cast<std::size_t>(x.dim(3)) != fft::half_width(width)) {
    throw Error("real2complex: tensor " + to_string(x.shape()) + " inconsistent with spatial shape (" +
                std::to_string(height) + "," + std::to_string(width) + ")");
  }
  const int C = x.dim(1) / 2;
  return {slice_channels(x, 0, C), slice_channels(x, C, 2 * C), height, width};
}

template <class T>
ComplexSpectrum<T> rfft2(const Tensor<T>& x) {
  detail::expect_4d(x.shape(), "rfft2");
  return real2complex(rfft2_packed(x), x.dim(2), x.dim(3));
}

template <class T>
Tensor<T> irfft2(const ComplexSpectrum<T>& s) {
  if (s.real.ndim() != 4 || s.real.dim(2) != s.height ||
      static_cast<std::size_t>(s.real.dim(3)) != fft::half_width(s.width)) {
    throw Error("irfft2: spectrum " + to_string(s.real.shape()) + " inconsistent with spatial shape (" +
                std::to_string(s.height) + "," + std::to_string(s.width) + ")");
  }
  return irfft2_packed(complex2real(s), s.width);
}

}  // namespace quadnet

#pragma once

// 8-bit grayscale PGM export of windowed images and Fourier log-amplitude
// views of sinograms.

#include <filesystem>
#include <fstream>

#include "quadnet/fft.hpp"
#include "quadnet/losses.hpp"

namespace quadnet {

// [0, 1] -> 0..255, clamped, rounding half up.
inline std::uint8_t quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

struct Gray8 {
  int height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
};

inline Gray8 to_gray8(const TensorD& unit) {
  if (unit.ndim() != 2) throw Error("raster: expected a 2-D image, got " + to_string(unit.shape()));
  Gray8 g{unit.dim(0), unit.dim(1), {}};
  g.pixels.reserve(unit.size());
  for (double v : unit.data()) g.pixels.push_back(quantize(v));
  return g;
}

inline void write_pgm(const std::filesystem::path& path, const Gray8& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_pgm: cannot open " + path.string());
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw Error("write_pgm: write failed for " + path.string());
}

inline void write_pgm(const std::filesystem::path& path, const TensorD& unit) { write_pgm(path, to_gray8(unit)); }

// HU image through a display window.
inline void write_window_pgm(const std::filesystem::path& path, const TensorD& hu, const WindowSpec& w) {
  write_pgm(path, apply_window(hu, w));
}

inline Gray8 read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("read_pgm: cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  Gray8 g;
  f >> magic >> g.width >> g.height >> maxval;
  if (magic != "P5" || maxval != 255 || g.width <= 0 || g.height <= 0) {
    throw Error("read_pgm: " + path.string() + " is not an 8-bit binary PGM");
  }
  f.get();
  g.pixels.resize(static_cast<std::size_t>(g.width) * g.height);
  f.read(reinterpret_cast<char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
  if (!f) throw Error("read_pgm: truncated file " + path.string());
  return g;
}

// log(1 + |F|) of the full 2-D spectrum of a (H, W) array, with the DC term
// moved to (H/2, W/2).
inline TensorD log_amplitude_spectrum(const TensorD& x) {
  if (x.ndim() != 2) throw Error("spectrum: expected a 2-D array, got " + to_string(x.shape()));
  const int H = x.dim(0), W = x.dim(1);
  std::vector<std::complex<double>> a(x.data().begin(), x.data().end()), row(W), col(H);
  for (int i = 0; i < H; ++i) {
    std::copy_n(a.begin() + i * W, W, row.begin());
    fft::transform(row.data(), W, -1);
    std::copy(row.begin(), row.end(), a.begin() + i * W);
  }
  for (int j = 0; j < W; ++j) {
    for (int i = 0; i < H; ++i) col[i] = a[i * W + j];
    fft::transform(col.data(), H, -1);
    for (int i = 0; i < H; ++i) a[i * W + j] = col[i];
  }
  TensorD out({H, W});
  auto o = out.mutable_data();
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      o[((i + H / 2) % H) * W + (j + W / 2) % W] = std::log1p(std::abs(a[i * W + j]));
    }
  return out;
}

// Linear min-max stretch to [0, 1] (constant input maps to 0).
inline TensorD stretch(const TensorD& x) {
  const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  const double a = *lo, span = *hi - *lo;
  TensorD out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = span > 0 ? (x[i] - a) / span : 0.0;
  return out;
}

}  // namespace quadnet

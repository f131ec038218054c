#pragma once

// Polychromatic fan-beam simulation of metal-implanted phantoms.
//
// Tissue attenuation is treated as energy independent (the 70 keV value);
// only metal pixels carry an energy-dependent curve. A corrupted sinogram is
//   S_mc = P(X) - ln sum_E eta(E) exp(-mu_Ti(E) P(mask))
// and the second term is evaluated only on rays that intersect the metal, so
// outside the trace S_mc equals the clean sinogram bit for bit.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>

#include "quadnet/geometry.hpp"
#include "quadnet/qnt_io.hpp"

namespace quadnet {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// ---------------------------------------------------------------------------
// Spectrum and materials

namespace phys_detail {

struct Curve {
  std::vector<double> kev, value;
};

// Log-log interpolation; tables are smooth power laws between K edges, and
// none of the three materials has an edge inside 20-150 keV.
inline double loglog(const Curve& c, double e) {
  if (e <= c.kev.front()) return c.value.front();
  if (e >= c.kev.back()) return c.value.back();
  auto it = std::upper_bound(c.kev.begin(), c.kev.end(), e);
  const std::size_t i = static_cast<std::size_t>(it - c.kev.begin());
  const double t = std::log(e / c.kev[i - 1]) / std::log(c.kev[i] / c.kev[i - 1]);
  return std::exp(std::log(c.value[i - 1]) + t * (std::log(c.value[i]) - std::log(c.value[i - 1])));
}

// Mass attenuation (cm^2/g) with coherent scattering, rounded.
inline const Curve& aluminium() {
  static const Curve c{{20, 30, 40, 50, 60, 80, 100, 150}, {3.44, 1.128, 0.5685, 0.3681, 0.2778, 0.2018, 0.1704, 0.1378}};
  return c;
}
inline const Curve& water() {
  static const Curve c{{20, 30, 40, 50, 60, 80, 100, 150}, {0.8096, 0.3756, 0.2683, 0.2269, 0.2059, 0.1837, 0.1707, 0.1505}};
  return c;
}
inline const Curve& cortical_bone() {
  static const Curve c{{20, 30, 40, 50, 60, 80, 100, 150}, {4.001, 1.331, 0.6655, 0.4242, 0.3148, 0.2229, 0.1855, 0.1480}};
  return c;
}
inline const Curve& titanium() {
  static const Curve c{{20, 30, 40, 50, 60, 80, 100, 150}, {15.85, 4.972, 2.214, 1.213, 0.7661, 0.4052, 0.2721, 0.1649}};
  return c;
}

}  // namespace phys_detail

struct SpectrumModel {
  std::vector<double> energies;  // keV bin centers
  std::vector<double> eta;       // normalized fluence weights
  double reference_energy = 70.0;
  double photons_per_ray = 2e7;

  // Kramers bremsstrahlung photon spectrum of a 120 kVp tube, hardened by
  // 2.5 mm of aluminium, on 1 keV bins from 20 to 120 keV.
  static SpectrumModel polychromatic(double filter_cm = 0.25) {
    SpectrumModel s;
    const double kvp = 120.0;
    for (int e = 20; e <= 120; ++e) {
      const double E = e;
      const double kramers = (kvp - E) / E;
      const double filter = std::exp(-phys_detail::loglog(phys_detail::aluminium(), E) * 2.699 * filter_cm);
      s.energies.push_back(E);
      s.eta.push_back(std::max(0.0, kramers * filter));
    }
    s.normalize();
    return s;
  }

  static SpectrumModel monochromatic(double kev) {
    SpectrumModel s;
    s.energies = {kev};
    s.eta = {1.0};
    s.reference_energy = kev;
    return s;
  }

  void normalize() {
    double total = 0;
    for (double w : eta) total += w;
    if (!(total > 0)) throw Error("spectrum: weights sum to zero");
    for (double& w : eta) w /= total;
  }

  double mean_energy() const {
    double m = 0;
    for (std::size_t i = 0; i < eta.size(); ++i) m += eta[i] * energies[i];
    return m;
  }

  void validate() const {
    if (energies.empty() || energies.size() != eta.size()) throw Error("spectrum: energies/eta size mismatch");
    double total = 0;
    for (std::size_t i = 0; i < eta.size(); ++i) {
      if (!(eta[i] >= 0)) throw Error("spectrum: negative weight");
      if (i && !(energies[i] > energies[i - 1])) throw Error("spectrum: energies not strictly increasing");
      total += eta[i];
    }
    if (std::abs(total - 1.0) > 1e-9) throw Error("spectrum: weights do not sum to 1");
    if (!(photons_per_ray > 0)) throw Error("spectrum: photons_per_ray must be positive");
  }
};

enum class Material { water, bone, titanium };

inline const char* material_name(Material m) {
  switch (m) {
    case Material::water: return "water";
    case Material::bone: return "bone";
    case Material::titanium: return "titanium";
  }
  return "?";
}

// Linear attenuation in cm^-1.
inline double attenuation(Material m, double kev) {
  switch (m) {
    case Material::water: return phys_detail::loglog(phys_detail::water(), kev);
    case Material::bone: return phys_detail::loglog(phys_detail::cortical_bone(), kev) * 1.92;
    case Material::titanium: return phys_detail::loglog(phys_detail::titanium(), kev) * 4.54;
  }
  throw Error("attenuation: unknown material");
}

struct MaterialTable {
  std::vector<double> energies;
  std::vector<double> water, bone, titanium;  // cm^-1 on each spectrum bin

  static MaterialTable sample(const SpectrumModel& s) {
    MaterialTable t;
    t.energies = s.energies;
    for (double e : s.energies) {
      t.water.push_back(attenuation(Material::water, e));
      t.bone.push_back(attenuation(Material::bone, e));
      t.titanium.push_back(attenuation(Material::titanium, e));
    }
    return t;
  }
};

// ---------------------------------------------------------------------------
// Phantoms

enum class PhantomKind { disks, ellipses, lung };

inline PhantomKind phantom_kind(const std::string& s) {
  if (s == "disks") return PhantomKind::disks;
  if (s == "ellipses") return PhantomKind::ellipses;
  if (s == "lung" || s == "lung-like") return PhantomKind::lung;
  throw Error("unknown phantom kind '" + s + "'");
}

// Filled ellipse in cm; later shapes overwrite earlier ones.
struct Ellipse {
  double cx = 0, cy = 0, a = 1, b = 1, angle = 0;  // angle in radians
  double value = 0;                                // cm^-1
  bool bone = false;

  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (x - cx) * c + (y - cy) * s, v = -(x - cx) * s + (y - cy) * c;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

struct Phantom {
  CtImage<double> image;  // attenuation, cm^-1
  TensorD bone_map;       // 1 where a bone insert is the top-most shape
  std::vector<Ellipse> shapes;
};

inline double pixel_x(int j, int n, double ps) { return (j - 0.5 * (n - 1)) * ps; }
inline double pixel_y(int i, int n, double ps) { return (0.5 * (n - 1) - i) * ps; }

inline Phantom render_phantom(const std::vector<Ellipse>& shapes, int size, double pixel_spacing) {
  Phantom p{{TensorD({size, size}), Units::mu, pixel_spacing}, TensorD({size, size}), shapes};
  auto img = p.image.values.mutable_data();
  auto bone = p.bone_map.mutable_data();
  for (int i = 0; i < size; ++i) {
    const double y = pixel_y(i, size, pixel_spacing);
    for (int j = 0; j < size; ++j) {
      const double x = pixel_x(j, size, pixel_spacing);
      for (const auto& e : shapes) {
        if (e.contains(x, y)) {
          img[i * size + j] = e.value;
          bone[i * size + j] = e.bone ? 1.0 : 0.0;
        }
      }
    }
  }
  return p;
}

// Procedural body-like phantom: a water-like body ellipse with soft-tissue
// and bone inserts (and lungs for the lung kind) in air. All values lie in
// [0, 3 mu_w].
inline Phantom make_phantom(std::uint64_t seed, int size, double pixel_spacing, PhantomKind kind) {
  std::mt19937_64 rng(splitmix64(seed));
  auto U = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double R = 0.5 * size * pixel_spacing;
  const bool round = kind == PhantomKind::disks;
  auto shape = [&](double cx, double cy, double a, double b, double value, bool bone) {
    Ellipse e{cx, cy, a, round ? a : b, round ? 0.0 : U(0, std::numbers::pi), value, bone};
    return e;
  };

  std::vector<Ellipse> shapes;
  const double A = U(0.62, 0.78) * R, B = round ? A : U(0.48, 0.64) * R;
  shapes.push_back(shape(U(-0.04, 0.04) * R, U(-0.04, 0.04) * R, A, B, kMuWater * U(0.97, 1.03), false));
  shapes.back().angle = round ? 0.0 : U(-0.2, 0.2);
  const Ellipse body = shapes.back();

  // A point inside the body at normalized radius <= rmax.
  auto inside = [&](double rmax) {
    const double t = U(0, 2 * std::numbers::pi), r = rmax * std::sqrt(U(0, 1));
    const double u = r * body.a * std::cos(t), v = r * body.b * std::sin(t);
    const double c = std::cos(body.angle), s = std::sin(body.angle);
    return std::pair{body.cx + u * c - v * s, body.cy + u * s + v * c};
  };

  if (kind == PhantomKind::lung) {
    const double lx = 0.42 * body.a, ly = 0.05 * body.b;
    for (double sgn : {-1.0, 1.0}) {
      shapes.push_back(Ellipse{body.cx + sgn * lx, body.cy + ly, U(0.26, 0.32) * body.a, U(0.5, 0.62) * body.b,
                               U(-0.25, 0.25), kMuWater * U(0.2, 0.3), false});
      const Ellipse lung = shapes.back();
      const int vessels = 2 + static_cast<int>(rng() % 3);
      for (int k = 0; k < vessels; ++k) {
        const double t = U(0, 2 * std::numbers::pi), r = 0.6 * std::sqrt(U(0, 1));
        const double vr = U(0.25, 0.5);
        shapes.push_back(Ellipse{lung.cx + r * lung.a * std::cos(t), lung.cy + r * lung.b * std::sin(t), vr, vr, 0,
                                 kMuWater * U(0.95, 1.1), false});
      }
    }
    // Spine.
    const double sr = U(0.09, 0.12) * body.b;
    shapes.push_back(Ellipse{body.cx, body.cy - 0.72 * body.b, sr * 1.2, sr, 0, kMuWater * U(1.8, 2.4), true});
  } else {
    const int soft = 2 + static_cast<int>(rng() % 3);
    for (int k = 0; k < soft; ++k) {
      auto [x, y] = inside(0.6);
      const double a = U(0.08, 0.2) * R;
      shapes.push_back(shape(x, y, a, a * U(0.5, 1.0), kMuWater * U(0.9, 1.15), false));
    }
    const int bones = 1 + static_cast<int>(rng() % 3);
    for (int k = 0; k < bones; ++k) {
      auto [x, y] = inside(0.65);
      const double a = U(0.05, 0.11) * R;
      shapes.push_back(shape(x, y, a, a * U(0.6, 1.0), kMuWater * U(1.6, 2.6), true));
      if (rng() % 2 == 0) {
        // Marrow core.
        Ellipse core = shapes.back();
        core.a *= 0.5;
        core.b *= 0.5;
        core.value = kMuWater * U(1.05, 1.3);
        core.bone = false;
        shapes.push_back(core);
      }
    }
  }
  return render_phantom(shapes, size, pixel_spacing);
}

// ---------------------------------------------------------------------------
// Metal library

// A metal object as a set of pixel offsets from an anchor pixel; the pixel
// count does not depend on where it is placed.
struct MetalShape {
  std::string name;
  std::vector<std::pair<int, int>> offsets;  // (row, col)
  int area() const { return static_cast<int>(offsets.size()); }
};

namespace phys_detail {

inline MetalShape disk(std::string name, double r, int dx = 0) {
  MetalShape s{std::move(name), {}};
  const int n = static_cast<int>(std::ceil(r));
  for (int i = -n; i <= n; ++i) {
    for (int j = -n; j <= n; ++j) {
      if (i * i + j * j <= r * r) s.offsets.emplace_back(i, j + dx);
    }
  }
  return s;
}

inline MetalShape rect(std::string name, int h, int w) {
  MetalShape s{std::move(name), {}};
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) s.offsets.emplace_back(i - h / 2, j - w / 2);
  }
  return s;
}

inline MetalShape pair(std::string name, double r, int gap) {
  MetalShape a = disk(name, r, -gap / 2), b = disk(name, r, gap - gap / 2);
  a.offsets.insert(a.offsets.end(), b.offsets.begin(), b.offsets.end());
  return a;
}

}  // namespace phys_detail

// Twelve implants from a single pixel up to ~37 pixels, grouped into five
// size bins (small to large).
struct MetalLibrary {
  std::vector<MetalShape> shapes;
  std::vector<int> bin_edges{5, 10, 16, 26};  // area < edge[k] -> bin k

  static MetalLibrary standard() {
    using namespace phys_detail;
    MetalLibrary lib;
    lib.shapes = {disk("pin", 0.5),        rect("wire", 1, 4),       disk("screw", 1.0),  rect("rod", 1, 8),
                  disk("peg", 1.5),        pair("clips", 1.0, 6),    rect("plate", 2, 6), disk("stem", 2.0),
                  pair("screws", 1.5, 8),  disk("cap", 2.5),         rect("bar", 3, 8),   disk("head", 3.2)};
    return lib;
  }

  int num_bins() const { return static_cast<int>(bin_edges.size()) + 1; }

  int bin_of(int area) const {
    int b = 0;
    while (b < static_cast<int>(bin_edges.size()) && area >= bin_edges[b]) ++b;
    return b;
  }
};

// Places `shape` at a random anchor whose every pixel lands on soft tissue
// (between 0.5 and 1.5 mu_w), optionally transposed. Falls back to the image
// center if no such anchor is found.
inline TensorD place_metal(const MetalShape& shape, const CtImage<double>& img, std::mt19937_64& rng) {
  const int N = img.values.dim(0);
  TensorD mask({N, N});
  const bool transpose = rng() % 2 == 1;
  auto pixel = [&](std::pair<int, int> o, int ai, int aj) {
    return transpose ? std::pair{ai + o.second, aj + o.first} : std::pair{ai + o.first, aj + o.second};
  };
  auto ok = [&](int ai, int aj) {
    for (auto o : shape.offsets) {
      auto [i, j] = pixel(o, ai, aj);
      if (i < 1 || j < 1 || i >= N - 1 || j >= N - 1) return false;
      const double v = img.values[i * N + j];
      if (v < 0.5 * kMuWater || v > 1.5 * kMuWater) return false;
    }
    return true;
  };
  int ai = N / 2, aj = N / 2;
  for (int attempt = 0; attempt < 2000; ++attempt) {
    const int i = static_cast<int>(rng() % N), j = static_cast<int>(rng() % N);
    if (ok(i, j)) {
      ai = i;
      aj = j;
      break;
    }
  }
  for (auto o : shape.offsets) {
    auto [i, j] = pixel(o, ai, aj);
    if (i >= 0 && j >= 0 && i < N && j < N) mask.mutable_data()[i * N + j] = 1.0;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Trace, projection, dilation

inline void expect_binary(const TensorD& m, const char* what) {
  for (double v : m.data()) {
    if (v != 0.0 && v != 1.0) throw Error(std::string(what) + ": values must be 0 or 1");
  }
}

inline Sinogram<double> mask_projection(const TensorD& mask, const FanBeamGeometry& g) {
  return forward_project(CtImage<double>{mask, Units::mu, g.pixel_spacing}, g);
}

// Bins whose ray touches the metal. The 1e-12 guard rejects interpolation
// dust; with Joseph weights every intersecting ray picks up at least a
// visible fraction of a pixel.
inline constexpr double kTraceThreshold = 1e-12;

inline TensorD trace_from_projection(const TensorD& proj) {
  TensorD t(proj.shape());
  auto out = t.mutable_data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = proj[i] > kTraceThreshold ? 1.0 : 0.0;
  return t;
}

inline TensorD compute_trace(const TensorD& mask, const FanBeamGeometry& g) {
  return trace_from_projection(mask_projection(mask, g).values);
}

// Binary k x k max filter (zero padding). k = 1 or k = 0 return a copy.
template <class T>
Tensor<T> dilate(const Tensor<T>& m, int k) {
  if (m.ndim() != 2) throw Error("dilate: expected a 2-D grid, got " + to_string(m.shape()));
  if (k == 0 || k == 1) return m.clone();
  if (k < 0 || k % 2 == 0) throw Error("dilate: kernel size must be odd, got " + std::to_string(k));
  const int H = m.dim(0), W = m.dim(1), r = k / 2;
  // Separable: rows then columns.
  std::vector<T> tmp(m.size(), T(0));
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      T v = T(0);
      for (int d = std::max(0, j - r); d <= std::min(W - 1, j + r); ++d) v = std::max(v, m[i * W + d]);
      tmp[i * W + j] = v;
    }
  }
  Tensor<T> out(m.shape());
  auto o = out.mutable_data();
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      T v = T(0);
      for (int d = std::max(0, i - r); d <= std::min(H - 1, i + r); ++d) v = std::max(v, tmp[d * W + j]);
      o[i * W + j] = v;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Polychromatic projection

struct MaterialImage {
  CtImage<double> tissue;  // energy-independent part, cm^-1
  TensorD metal;           // binary titanium mask
};

inline MaterialImage implant_metal(const CtImage<double>& img, const TensorD& mask) {
  if (img.units != Units::mu) throw Error("implant_metal: image must be in attenuation units");
  if (img.values.shape() != mask.shape()) {
    throw Error("implant_metal: mask " + to_string(mask.shape()) + " does not match image " +
                to_string(img.values.shape()));
  }
  expect_binary(mask, "implant_metal");
  return {img, mask.clone()};
}

// -ln sum_E eta(E) exp(-mu_Ti(E) * length); the polychromatic metal line
// integral for `length` cm of titanium.
inline double metal_log_attenuation(double length, const SpectrumModel& s, const MaterialTable& t) {
  double I = 0;
  for (std::size_t e = 0; e < s.eta.size(); ++e) I += s.eta[e] * std::exp(-t.titanium[e] * length);
  return -std::log(I);
}

// One noisy measurement of line integral p: Poisson counts at mean N0 e^-p,
// clamped to at least one photon before the log.
inline double noisy_line_integral(double p, double N0, std::mt19937_64& rng) {
  std::poisson_distribution<long long> pd(N0 * std::exp(-p));
  const double counts = std::max<double>(1.0, static_cast<double>(pd(rng)));
  return -std::log(counts / N0);
}

struct PolyResult {
  Sinogram<double> corrupted;  // S_mc
  Sinogram<double> clean;      // P(X), noise free
  TensorD mask_proj;           // P(mask) in pixels x cm per pixel, i.e. cm of metal
  TensorD trace;               // M
};

inline PolyResult polychromatic_project_full(const MaterialImage& m, const SpectrumModel& s, const FanBeamGeometry& g,
                                             bool noise, std::uint64_t seed) {
  s.validate();
  const MaterialTable table = MaterialTable::sample(s);
  auto clean = forward_project(m.tissue, g);
  TensorD proj = mask_projection(m.metal, g).values;
  TensorD trace = trace_from_projection(proj);
  TensorD smc = clean.values.clone();
  auto out = smc.mutable_data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (trace[i] != 0.0) out[i] += metal_log_attenuation(proj[i], s, table);
  }
  if (noise) {
    std::mt19937_64 rng(splitmix64(seed ^ 0x5eed0f9015e5ull));
    const double N0 = s.photons_per_ray;
    for (auto& v : out) v = noisy_line_integral(v, N0, rng);
  }
  for (double v : out) {
    if (!std::isfinite(v)) throw Error("polychromatic_project: non-finite line integral");
  }
  return {{g, smc}, clean, proj, trace};
}

inline Sinogram<double> polychromatic_project(const MaterialImage& m, const SpectrumModel& s, const FanBeamGeometry& g,
                                              bool noise, std::uint64_t seed) {
  return polychromatic_project_full(m, s, g, noise, seed).corrupted;
}

// ---------------------------------------------------------------------------
// Datasets

struct Sample {
  int index = 0;
  std::uint64_t seed = 0;
  int metal_bin = 0;
  TensorD s_mc;       // (Nd, Nv) corrupted sinogram
  TensorD trace;      // (Nd, Nv) binary
  TensorD mask_proj;  // (Nd, Nv)
  TensorD s_gt;       // (Nd, Nv) clean sinogram
  TensorD x_gt;       // (N, N) attenuation
  TensorD mask;       // (N, N) binary
};

struct DatasetOptions {
  bool noise = false;
  std::vector<PhantomKind> kinds{PhantomKind::disks, PhantomKind::ellipses, PhantomKind::lung};
};

inline std::uint64_t sample_seed(std::uint64_t seed, int index) {
  return splitmix64(seed * 0x100000001b3ull + static_cast<std::uint64_t>(index));
}

inline Sample make_sample(int index, std::uint64_t seed, const FanBeamGeometry& g, const SpectrumModel& s,
                          const MetalLibrary& lib, const DatasetOptions& opt) {
  if (lib.shapes.empty()) throw Error("make_dataset: metal library is empty");
  if (opt.kinds.empty()) throw Error("make_dataset: no phantom kinds");
  const std::uint64_t sseed = sample_seed(seed, index);
  const PhantomKind kind = opt.kinds[static_cast<std::size_t>(index) % opt.kinds.size()];
  Phantom ph = make_phantom(sseed, g.image_size, g.pixel_spacing, kind);
  std::mt19937_64 rng(splitmix64(sseed + 17));
  const MetalShape& shape = lib.shapes[rng() % lib.shapes.size()];
  TensorD mask = place_metal(shape, ph.image, rng);
  auto poly = polychromatic_project_full(implant_metal(ph.image, mask), s, g, opt.noise, sseed);
  Sample out;
  out.index = index;
  out.seed = sseed;
  out.metal_bin = lib.bin_of(shape.area());
  out.s_mc = poly.corrupted.values;
  out.trace = poly.trace;
  out.mask_proj = poly.mask_proj;
  out.s_gt = poly.clean.values;
  out.x_gt = ph.image.values;
  out.mask = mask;
  return out;
}

inline std::vector<Sample> make_dataset(int n, const FanBeamGeometry& g, const SpectrumModel& s,
                                        const MetalLibrary& lib, std::uint64_t seed, const DatasetOptions& opt = {}) {
  g.validate();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(make_sample(i, seed, g, s, lib, opt));
  return out;
}

inline const std::vector<std::string>& sample_fields() {
  static const std::vector<std::string> f = {"s_mc", "trace", "mask_proj", "s_gt", "x_gt", "mask"};
  return f;
}

inline TensorD& sample_field(Sample& s, const std::string& name) {
  if (name == "s_mc") return s.s_mc;
  if (name == "trace") return s.trace;
  if (name == "mask_proj") return s.mask_proj;
  if (name == "s_gt") return s.s_gt;
  if (name == "x_gt") return s.x_gt;
  if (name == "mask") return s.mask;
  throw Error("unknown sample field '" + name + "'");
}

inline std::string sample_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04d", index);
  return buf;
}

// Layout: <dir>/manifest.txt ("index seed bin" per line) and
// <dir>/sample_NNNN/<field>.qnt.
inline void save_dataset(const std::filesystem::path& dir, std::vector<Sample> samples) {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.txt", std::ios::trunc);
  if (!man) throw Error("cannot write manifest in " + dir.string());
  for (auto& s : samples) {
    man << s.index << " " << s.seed << " " << s.metal_bin << "\n";
    const auto sd = dir / sample_dir_name(s.index);
    std::filesystem::create_directories(sd);
    for (const auto& f : sample_fields()) save_qnt(sd / (f + ".qnt"), sample_field(s, f));
  }
}

inline std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.txt");
  if (!man) throw Error("no manifest.txt in " + dir.string());
  std::vector<Sample> out;
  Sample s;
  while (man >> s.index >> s.seed >> s.metal_bin) {
    const auto sd = dir / sample_dir_name(s.index);
    for (const auto& f : sample_fields()) sample_field(s, f) = load_qnt<double>(sd / (f + ".qnt"));
    out.push_back(s);
  }
  if (!man.eof()) throw Error("malformed manifest in " + dir.string());
  return out;
}

}  // namespace quadnet

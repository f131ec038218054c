#pragma once

// FFC block, the sinogram network (SFR-Net and its conventional SR-Net
// twin), the image U-net (LU-Net) and the Fourier-skip refinement network
// (IFR-Net, with the plain-skip IR-Net twin).

#include "quadnet/fft.hpp"
#include "quadnet/geometry.hpp"
#include "quadnet/nn.hpp"

namespace quadnet {

// ReflectPad to even H and W before an FFT, crop back after.
template <class T, class F>
Tensor<T> with_even_extent(const Tensor<T>& x, F&& f) {
  const int H = x.dim(2), W = x.dim(3);
  if (H < 2 || W < 2) throw Error("spectral op needs H, W >= 2, got " + to_string(x.shape()));
  if (H % 2 == 0 && W % 2 == 0) return f(x);
  return crop(f(reflect_pad(x, 0, H % 2, 0, W % 2)), 0, 0, H, W);
}

// rfft2 -> complex2real -> Conv1x1 -> BN -> ReLU -> real2complex -> irfft2.
// BN and ReLU can be switched off (used to configure an exact identity).
template <class T>
struct FourierUnit {
  using value_type = T;
  Conv<T> conv;
  BatchNorm<T> bn;
  bool use_bn = true, use_relu = true;

  FourierUnit() = default;
  FourierUnit(int channels, std::mt19937_64& rng) : conv(2 * channels, 2 * channels, 1, rng, 1, false), bn(2 * channels) {}

  Tensor<T> operator()(const Tensor<T>& x, BnMode mode) {
    return with_even_extent(x, [&](const Tensor<T>& xe) {
      // The packed layout of rfft2_packed is complex2real(rfft2(x)).
      Tensor<T> f = conv(rfft2_packed(xe));
      if (use_bn) f = bn(f, mode);
      if (use_relu) f = relu(f);
      return irfft2_packed(f, xe.dim(3));
    });
  }

  void collect(Collector<T>& c, const std::string& p) {
    conv.collect(c, join_name(p, "conv"));
    if (use_bn) bn.collect(c, join_name(p, "bn"));
  }
};

inline int global_channels(int c) { return (3 * c) / 4; }

// Fast Fourier convolution block on C channels: the first C - floor(3C/4)
// channels form the local branch, the rest the global branch.
//   y_l = l2l(x_l) + g2l(x_g)
//   y_g = l2g(x_l) + FU(x_g)
// then BN + ReLU per branch and a residual connection.
template <class T>
struct FfcBlock {
  using value_type = T;
  int channels = 0, cl = 0, cg = 0;
  Conv<T> l2l, l2g, g2l;
  FourierUnit<T> g2g;
  BatchNorm<T> bn_l, bn_g;
  bool residual = true;

  FfcBlock() = default;
  FfcBlock(int c, std::mt19937_64& rng)
      : channels(c), cl(c - global_channels(c)), cg(global_channels(c)),
        l2l(cl, cl, 3, rng, 1, false), l2g(cl, cg, 3, rng, 1, false), g2l(cg, cl, 3, rng, 1, false),
        g2g(cg, rng), bn_l(cl), bn_g(cg) {
    if (cl < 1 || cg < 1) throw Error("FfcBlock: need at least 2 channels, got " + std::to_string(c));
  }

  Tensor<T> local_part(const Tensor<T>& x) const { return slice_channels(x, 0, cl); }
  Tensor<T> global_part(const Tensor<T>& x) const { return slice_channels(x, cl, channels); }

  Tensor<T> operator()(const Tensor<T>& x, BnMode mode) {
    if (x.ndim() != 4 || x.dim(1) != channels) {
      throw Error("FfcBlock: expected " + std::to_string(channels) + " channels, got " + to_string(x.shape()));
    }
    const Tensor<T> xl = local_part(x), xg = global_part(x);
    Tensor<T> yl = relu(bn_l(l2l(xl) + g2l(xg), mode));
    Tensor<T> yg = relu(bn_g(l2g(xl) + g2g(xg, mode), mode));
    Tensor<T> y = concat_channels<T>({yl, yg});
    return residual ? x + y : y;
  }

  void collect(Collector<T>& c, const std::string& p) {
    l2l.collect(c, join_name(p, "l2l"));
    l2g.collect(c, join_name(p, "l2g"));
    g2l.collect(c, join_name(p, "g2l"));
    g2g.collect(c, join_name(p, "g2g"));
    bn_l.collect(c, join_name(p, "bn_l"));
    bn_g.collect(c, join_name(p, "bn_g"));
  }
};

// Width r of a 1x1 -> 3x3 -> 1x1 bottleneck on cg channels whose weight
// count 2 cg r + 9 r^2 is closest to the 4 cg^2 of a Fourier unit.
inline int matched_bottleneck(int cg) {
  const double r = (-2.0 * cg + std::sqrt(4.0 * cg * cg + 144.0 * cg * cg)) / 18.0;
  return std::max(1, static_cast<int>(std::lround(r)));
}

// The conventional twin of FfcBlock: identical split and exchange convs, but
// the global path is a spatial bottleneck instead of a Fourier unit.
template <class T>
struct SrBlock {
  using value_type = T;
  int channels = 0, cl = 0, cg = 0, r = 0;
  Conv<T> l2l, l2g, g2l;
  ConvBnRelu<T> g_in, g_mid;
  Conv<T> g_out;
  BatchNorm<T> bn_l, bn_g;

  SrBlock() = default;
  SrBlock(int c, std::mt19937_64& rng)
      : channels(c), cl(c - global_channels(c)), cg(global_channels(c)), r(matched_bottleneck(cg)),
        l2l(cl, cl, 3, rng, 1, false), l2g(cl, cg, 3, rng, 1, false), g2l(cg, cl, 3, rng, 1, false),
        g_in(cg, r, 1, rng), g_mid(r, r, 3, rng), g_out(r, cg, 1, rng, 1, false), bn_l(cl), bn_g(cg) {}

  Tensor<T> operator()(const Tensor<T>& x, BnMode mode) {
    const Tensor<T> xl = slice_channels(x, 0, cl), xg = slice_channels(x, cl, channels);
    Tensor<T> yl = relu(bn_l(l2l(xl) + g2l(xg), mode));
    Tensor<T> yg = relu(bn_g(l2g(xl) + g_out(g_mid(g_in(xg, mode), mode)), mode));
    return x + concat_channels<T>({yl, yg});
  }

  void collect(Collector<T>& c, const std::string& p) {
    l2l.collect(c, join_name(p, "l2l"));
    l2g.collect(c, join_name(p, "l2g"));
    g2l.collect(c, join_name(p, "g2l"));
    g_in.collect(c, join_name(p, "g_in"));
    g_mid.collect(c, join_name(p, "g_mid"));
    g_out.collect(c, join_name(p, "g_out"));
    bn_l.collect(c, join_name(p, "bn_l"));
    bn_g.collect(c, join_name(p, "bn_g"));
  }
};

// ---------------------------------------------------------------------------
// Sinogram network

enum class SinoMode { completion, enhance_trace, enhance_projection };

inline SinoMode sino_mode(const std::string& s) {
  if (s == "completion") return SinoMode::completion;
  if (s == "enhance_trace") return SinoMode::enhance_trace;
  if (s == "enhance_projection") return SinoMode::enhance_projection;
  throw Error("unknown sinogram mode '" + s + "'");
}

inline const char* sino_mode_name(SinoMode m) {
  switch (m) {
    case SinoMode::completion: return "completion";
    case SinoMode::enhance_trace: return "enhance_trace";
    case SinoMode::enhance_projection: return "enhance_projection";
  }
  return "?";
}

// Line integrals are divided by this before entering a network and the
// network output is multiplied by it.
inline constexpr double kSinoScale = 4.0;

// Pads H and W up to a multiple of `m` by reflection.
template <class T>
Tensor<T> pad_to_multiple(const Tensor<T>& x, int m) {
  const int ph = (m - x.dim(2) % m) % m, pw = (m - x.dim(3) % m) % m;
  return (ph || pw) ? reflect_pad(x, 0, ph, 0, pw) : x;
}

// Encoder-decoder shared by SFR-Net and SR-Net: a head conv, two stride-2
// downsampling blocks, three bottleneck blocks, two nearest-upsampling
// blocks with concatenated skips and a zero-initialized 1x1 output head.
template <class T, class Block>
struct SinoNet {
  using value_type = T;
  SinoMode mode = SinoMode::completion;
  int width = 16;
  ConvBnRelu<T> head, down1, down2, up1, up2;
  std::vector<Block> blocks;
  Conv<T> out;

  SinoNet() = default;
  SinoNet(SinoMode mode_, int width_, std::uint64_t seed) : mode(mode_), width(width_) {
    std::mt19937_64 rng(seed);
    const int w = width;
    head = ConvBnRelu<T>(2, w, 3, rng);
    down1 = ConvBnRelu<T>(w, 2 * w, 3, rng, 2);
    down2 = ConvBnRelu<T>(2 * w, 4 * w, 3, rng, 2);
    for (int i = 0; i < 3; ++i) blocks.emplace_back(4 * w, rng);
    up1 = ConvBnRelu<T>(4 * w + 2 * w, 2 * w, 3, rng);
    up2 = ConvBnRelu<T>(2 * w + w, w, 3, rng);
    out = Conv<T>(w, 1, 1, rng, 1, true, true);
  }

  // x: (B, 2, H, W) already scaled network input; returns (B, 1, H, W) in
  // network units.
  Tensor<T> operator()(const Tensor<T>& x, BnMode bn) {
    if (x.ndim() != 4 || x.dim(1) != 2) throw Error("SinoNet: expected (B, 2, H, W) input, got " + to_string(x.shape()));
    const int H = x.dim(2), W = x.dim(3);
    Tensor<T> xp = pad_to_multiple(x, 4);
    Tensor<T> h0 = head(xp, bn);
    Tensor<T> h1 = down1(h0, bn);
    Tensor<T> h = down2(h1, bn);
    for (auto& b : blocks) h = b(h, bn);
    h = up1(concat_channels<T>({upsample_nearest2x(h), h1}), bn);
    h = up2(concat_channels<T>({upsample_nearest2x(h), h0}), bn);
    Tensor<T> y = out(h);
    return (y.dim(2) != H || y.dim(3) != W) ? crop(y, 0, 0, H, W) : y;
  }

  void collect(Collector<T>& c, const std::string& p) {
    head.collect(c, join_name(p, "head"));
    down1.collect(c, join_name(p, "down1"));
    down2.collect(c, join_name(p, "down2"));
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(c, join_name(p, "block" + std::to_string(i)));
    up1.collect(c, join_name(p, "up1"));
    up2.collect(c, join_name(p, "up2"));
    out.collect(c, join_name(p, "out"));
  }
};

template <class T>
using SfrNet = SinoNet<T, FfcBlock<T>>;
template <class T>
using SrNet = SinoNet<T, SrBlock<T>>;

// Builds the 2-channel network input for a mode. All tensors (B, 1, Nd, Nv);
// `aux` is the trace for the first two modes and the metal mask projection
// for enhance_projection. Completion zeroes the sinogram inside the trace so
// corrupted values never reach the network.
template <class T>
Tensor<T> sino_input(SinoMode mode, const Tensor<T>& s_mc, const Tensor<T>& trace, const Tensor<T>& aux) {
  if (s_mc.shape() != trace.shape() || s_mc.shape() != aux.shape()) {
    throw Error("sino_input: shapes " + to_string(s_mc.shape()) + ", " + to_string(trace.shape()) + ", " +
                to_string(aux.shape()) + " disagree");
  }
  const T inv = T(1.0 / kSinoScale);
  Tensor<T> s = scale(s_mc, inv);
  if (mode == SinoMode::completion) {
    Tensor<T> keep = affine(trace, T(-1), T(1));
    return concat_channels<T>({mul(s, keep), trace});
  }
  if (mode == SinoMode::enhance_trace) return concat_channels<T>({s, trace});
  return concat_channels<T>({s, aux});
}

template <class T, class Block>
Tensor<T> sfr_forward(SinoNet<T, Block>& net, const Tensor<T>& s_mc, const Tensor<T>& trace, const Tensor<T>& aux,
                      BnMode bn) {
  return scale(net(sino_input(net.mode, s_mc, trace, aux), bn), T(kSinoScale));
}

// ---------------------------------------------------------------------------
// Image units: networks see the full-range window [WL 1000, WW 3000] as an
// affine map without clamping, n = (HU + 500) / 3000.

inline constexpr double kNormLowHu = -500.0, kNormWidthHu = 3000.0;

template <class T>
Tensor<T> normalized_from_mu(const Tensor<T>& mu) {
  // HU = 1000 (mu - mu_w) / mu_w
  const double a = 1000.0 / kMuWater / kNormWidthHu, b = (-1000.0 - kNormLowHu) / kNormWidthHu;
  return affine(mu, static_cast<T>(a), static_cast<T>(b));
}

template <class T>
Tensor<T> hu_from_normalized(const Tensor<T>& n) {
  return affine(n, static_cast<T>(kNormWidthHu), static_cast<T>(kNormLowHu));
}

// X_s = Recon(S_r * M + S_mc * (1 - M)), (B, 1, N, N) in normalized units.
template <class T>
Tensor<T> replace_and_recon(const Tensor<T>& s_r, const Tensor<T>& s_mc, const Tensor<T>& trace,
                            const FanBeamGeometry& g) {
  if (s_r.shape() != s_mc.shape() || s_r.shape() != trace.shape()) {
    throw Error("replace_and_recon: shapes " + to_string(s_r.shape()) + ", " + to_string(s_mc.shape()) + ", " +
                to_string(trace.shape()) + " disagree");
  }
  Tensor<T> spliced = mul(s_r, trace) + mul(s_mc, affine(trace, T(-1), T(1)));
  return normalized_from_mu(fbp_op(spliced, g));
}

// ---------------------------------------------------------------------------
// LU-Net: conventional U-net of depth 2 with a residual output.

template <class T>
struct LuNet {
  using value_type = T;
  int width = 16;
  ConvBnRelu<T> enc0, enc1, enc2, mid, dec1, dec0;
  Conv<T> out;

  LuNet() = default;
  LuNet(int width_, std::uint64_t seed) : width(width_) {
    std::mt19937_64 rng(seed);
    const int w = width;
    enc0 = ConvBnRelu<T>(1, w, 3, rng);
    enc1 = ConvBnRelu<T>(w, 2 * w, 3, rng, 2);
    enc2 = ConvBnRelu<T>(2 * w, 4 * w, 3, rng, 2);
    mid = ConvBnRelu<T>(4 * w, 4 * w, 3, rng);
    dec1 = ConvBnRelu<T>(4 * w + 2 * w, 2 * w, 3, rng);
    dec0 = ConvBnRelu<T>(2 * w + w, w, 3, rng);
    out = Conv<T>(w, 1, 1, rng, 1, true, true);
  }

  // x: (B, 1, N, N) normalized image; returns x + correction.
  Tensor<T> operator()(const Tensor<T>& x, BnMode bn) {
    const int H = x.dim(2), W = x.dim(3);
    Tensor<T> xp = pad_to_multiple(x, 4);
    Tensor<T> e0 = enc0(xp, bn), e1 = enc1(e0, bn);
    Tensor<T> h = mid(enc2(e1, bn), bn);
    h = dec1(concat_channels<T>({upsample_nearest2x(h), e1}), bn);
    h = dec0(concat_channels<T>({upsample_nearest2x(h), e0}), bn);
    Tensor<T> y = out(h);
    if (y.dim(2) != H || y.dim(3) != W) y = crop(y, 0, 0, H, W);
    return x + y;
  }

  void collect(Collector<T>& c, const std::string& p) {
    enc0.collect(c, join_name(p, "enc0"));
    enc1.collect(c, join_name(p, "enc1"));
    enc2.collect(c, join_name(p, "enc2"));
    mid.collect(c, join_name(p, "mid"));
    dec1.collect(c, join_name(p, "dec1"));
    dec0.collect(c, join_name(p, "dec0"));
    out.collect(c, join_name(p, "out"));
  }
};

// ---------------------------------------------------------------------------
// IFR-Net

// Skip path combining ReLU(BN(Conv3x3(f))) in space with ReLU(Conv1x1) on
// the stacked spectrum of f, summed.
template <class T>
struct FourierSkip {
  using value_type = T;
  ConvBnRelu<T> local;
  FourierUnit<T> global;

  FourierSkip() = default;
  FourierSkip(int c, std::mt19937_64& rng) : local(c, c, 3, rng), global(c, rng) {
    global.use_bn = false;
    global.conv = Conv<T>(2 * c, 2 * c, 1, rng, 1, true);
  }

  Tensor<T> operator()(const Tensor<T>& f, BnMode bn) { return local(f, bn) + global(f, bn); }

  void collect(Collector<T>& c, const std::string& p) {
    local.collect(c, join_name(p, "local"));
    global.collect(c, join_name(p, "global"));
  }
};

// Encoder with conventional convs; decoder fed through Fourier skips (or
// identity skips when `fourier_skips` is false, the IR-Net variant).
template <class T>
struct IfrNet {
  using value_type = T;
  int width = 16;
  bool fourier_skips = true;
  ConvBnRelu<T> enc0, enc1, enc2, mid, dec1, dec0;
  FourierSkip<T> skip0, skip1;
  Conv<T> out;

  IfrNet() = default;
  IfrNet(int width_, std::uint64_t seed, bool fourier = true) : width(width_), fourier_skips(fourier) {
    std::mt19937_64 rng(seed);
    const int w = width;
    enc0 = ConvBnRelu<T>(2, w, 3, rng);
    enc1 = ConvBnRelu<T>(w, 2 * w, 3, rng, 2);
    enc2 = ConvBnRelu<T>(2 * w, 4 * w, 3, rng, 2);
    mid = ConvBnRelu<T>(4 * w, 4 * w, 3, rng);
    if (fourier_skips) {
      skip0 = FourierSkip<T>(w, rng);
      skip1 = FourierSkip<T>(2 * w, rng);
    }
    dec1 = ConvBnRelu<T>(4 * w + 2 * w, 2 * w, 3, rng);
    dec0 = ConvBnRelu<T>(2 * w + w, w, 3, rng);
    out = Conv<T>(w, 1, 1, rng, 1, true, true);
  }

  // Returns the residual; X_r = residual + X_u.
  Tensor<T> operator()(const Tensor<T>& x_s, const Tensor<T>& x_u, BnMode bn) {
    if (x_s.shape() != x_u.shape()) {
      throw Error("IfrNet: X_s " + to_string(x_s.shape()) + " vs X_u " + to_string(x_u.shape()));
    }
    const int H = x_s.dim(2), W = x_s.dim(3);
    Tensor<T> xp = pad_to_multiple(concat_channels<T>({x_s, x_u}), 4);
    Tensor<T> e0 = enc0(xp, bn), e1 = enc1(e0, bn);
    Tensor<T> h = mid(enc2(e1, bn), bn);
    Tensor<T> s1 = fourier_skips ? skip1(e1, bn) : e1;
    Tensor<T> s0 = fourier_skips ? skip0(e0, bn) : e0;
    h = dec1(concat_channels<T>({upsample_nearest2x(h), s1}), bn);
    h = dec0(concat_channels<T>({upsample_nearest2x(h), s0}), bn);
    Tensor<T> y = out(h);
    return (y.dim(2) != H || y.dim(3) != W) ? crop(y, 0, 0, H, W) : y;
  }

  void collect(Collector<T>& c, const std::string& p) {
    enc0.collect(c, join_name(p, "enc0"));
    enc1.collect(c, join_name(p, "enc1"));
    enc2.collect(c, join_name(p, "enc2"));
    mid.collect(c, join_name(p, "mid"));
    if (fourier_skips) {
      skip0.collect(c, join_name(p, "skip0"));
      skip1.collect(c, join_name(p, "skip1"));
    }
    dec1.collect(c, join_name(p, "dec1"));
    dec0.collect(c, join_name(p, "dec0"));
    out.collect(c, join_name(p, "out"));
  }
};

template <class T>
Tensor<T> ifr_forward(IfrNet<T>& net, const Tensor<T>& x_s, const Tensor<T>& x_u, BnMode bn) {
  return net(x_s, x_u, bn) + x_u;
}

// ---------------------------------------------------------------------------
// Quad-Net

template <class T>
struct QuadNetBatch {
  Tensor<T> s_mc, trace, mask_proj;  // (B, 1, Nd, Nv)
  Tensor<T> s_gt;                    // (B, 1, Nd, Nv)
  Tensor<T> x_gt;                    // (B, 1, N, N) normalized
};

template <class T>
struct QuadNetOutputs {
  Tensor<T> s_r, x_s, x_mc, x_u, x_r;  // images normalized; x_mc = Recon(S_mc)
};

template <class T, class Block = FfcBlock<T>>
struct QuadNet {
  using value_type = T;
  FanBeamGeometry geometry;
  SinoNet<T, Block> sfr;
  LuNet<T> lu;
  IfrNet<T> ifr;
  bool paste_metal = false;  // optional post-step, off by default

  QuadNet(const FanBeamGeometry& g, SinoMode mode, int width, std::uint64_t seed, bool fourier_skips = true)
      : geometry(g), sfr(mode, width, seed), lu(width, seed + 1), ifr(width, seed + 2, fourier_skips) {}

  QuadNetOutputs<T> forward(const QuadNetBatch<T>& b, BnMode bn) {
    QuadNetOutputs<T> o;
    const Tensor<T>& aux = sfr.mode == SinoMode::enhance_projection ? b.mask_proj : b.trace;
    o.s_r = sfr_forward(sfr, b.s_mc, b.trace, aux, bn);
    o.x_s = replace_and_recon(o.s_r, b.s_mc, b.trace, geometry);
    {
      NoGradGuard ng;
      o.x_mc = normalized_from_mu(fbp_op(b.s_mc, geometry));
    }
    o.x_u = lu(o.x_mc, bn);
    o.x_r = ifr_forward(ifr, o.x_s, o.x_u, bn);
    return o;
  }

  void collect(Collector<T>& c, const std::string& p) {
    sfr.collect(c, join_name(p, "sfr"));
    lu.collect(c, join_name(p, "lu"));
    ifr.collect(c, join_name(p, "ifr"));
  }
};

}  // namespace quadnet

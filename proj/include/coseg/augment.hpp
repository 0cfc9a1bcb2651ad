#pragma once

#include <array>
#include <cmath>
#include <optional>

#include "coseg/rng.hpp"
#include "coseg/segnet.hpp"
#include "coseg/seg_losses.hpp"
#include "coseg/tensor.hpp"

namespace coseg {

// Stochastic input perturbations. Everything here is a pure function of its
// inputs plus an explicit RNG handle; images are [3,H,W] (or [C,H,W] for
// probability maps) with values in [0,1].
//
// Geometric convention: pixel (row i, col j) sits at (x=j, y=i); transforms
// act about the image centre ((W-1)/2, (H-1)/2). An output pixel is valid
// when its inverse-mapped source coordinate lies inside [0,W-1] x [0,H-1];
// the same rule drives bilinear and nearest resampling, so an image and a
// map transformed with identical parameters share one validity mask.

// ---- geometric transforms ---------------------------------------------------

struct AffineParams {
  double rotation = 0;  // radians
  double dx = 0, dy = 0;  // pixels
  double scale = 1;
  bool hflip = false;
};

struct AffineRanges {
  double rotation = 0;   // max |rotation|
  double translate = 0;  // max |dx|, |dy|
  double scale_min = 1, scale_max = 1;
  bool hflip = false;
};

inline void validate(const AffineRanges& r) {
  if (r.rotation < 0 || r.translate < 0) throw ConfigError("affine ranges: magnitudes must be >= 0");
  if (!(r.scale_min > 0) || r.scale_min > r.scale_max)
    throw ConfigError("affine ranges: need 0 < scale_min <= scale_max");
}

// draw order is fixed (rotation, dx, dy, scale, hflip) so streams replay
inline AffineParams sample_affine(Rng& rng, const AffineRanges& r) {
  validate(r);
  AffineParams p;
  p.rotation = rng.uniform(-r.rotation, r.rotation);
  p.dx = rng.uniform(-r.translate, r.translate);
  p.dy = rng.uniform(-r.translate, r.translate);
  p.scale = rng.uniform(r.scale_min, r.scale_max);
  p.hflip = r.hflip && rng.bernoulli(0.5);
  return p;
}

namespace detail {

// source coordinate of an output pixel: inverse of translate.rotate.scale.hflip
struct InverseAffine {
  double m00, m01, m10, m11;  // applied to (out - centre - t)
  double cx, cy, tx, ty;

  explicit InverseAffine(const AffineParams& p, int h, int w) {
    cx = (w - 1) * 0.5;
    cy = (h - 1) * 0.5;
    tx = p.dx;
    ty = p.dy;
    const double c = std::cos(p.rotation), s = std::sin(p.rotation);
    const double inv = 1.0 / p.scale;
    const double f = p.hflip ? -1.0 : 1.0;
    // F^-1 . S^-1 . R(-th):  rows scaled by 1/s, x row negated under flip
    m00 = f * inv * c;
    m01 = f * inv * s;
    m10 = inv * -s;
    m11 = inv * c;
  }

  void map(double xo, double yo, double& xs, double& ys) const {
    const double qx = xo - cx - tx;
    const double qy = yo - cy - ty;
    xs = m00 * qx + m01 * qy + cx;
    ys = m10 * qx + m11 * qy + cy;
  }
};

}  // namespace detail

// Bilinear resample of an image under p. Invalid pixels are 0 and cleared
// in the mask.
template <class T>
inline std::pair<TensorT<T>, Mask> apply_affine(const TensorT<T>& image, const AffineParams& p) {
  if (image.rank() != 3) throw ShapeError("apply_affine: expected [C,H,W]");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const detail::InverseAffine inv(p, h, w);
  Mask valid(h, w);
  std::vector<T> out(image.numel(), T(0));
  const auto& src = image.values();
  const size_t plane = static_cast<size_t>(h) * w;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double xs, ys;
      inv.map(j, i, xs, ys);
      if (xs < 0 || xs > w - 1 || ys < 0 || ys > h - 1) continue;
      valid.set(i, j, 1);
      int x0 = static_cast<int>(std::floor(xs));
      int y0 = static_cast<int>(std::floor(ys));
      double fx = xs - x0, fy = ys - y0;
      if (x0 >= w - 1) { x0 = w - 1; fx = 0; }
      if (y0 >= h - 1) { y0 = h - 1; fy = 0; }
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      for (int ch = 0; ch < c; ++ch) {
        const T* pl = src.data() + ch * plane;
        const double v00 = pl[static_cast<size_t>(y0) * w + x0];
        const double v01 = pl[static_cast<size_t>(y0) * w + x1];
        const double v10 = pl[static_cast<size_t>(y1) * w + x0];
        const double v11 = pl[static_cast<size_t>(y1) * w + x1];
        const double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        out[ch * plane + static_cast<size_t>(i) * w + j] = static_cast<T>(v);
      }
    }
  return {TensorT<T>::from_data(image.shape(), std::move(out)), std::move(valid)};
}

// Nearest-neighbour resample for probability/class-score maps: vectors are
// moved whole, never blended across boundaries. Mask matches apply_affine.
template <class T>
inline std::pair<TensorT<T>, Mask> apply_affine_map(const TensorT<T>& seg, const AffineParams& p) {
  if (seg.rank() != 3) throw ShapeError("apply_affine_map: expected [C,H,W]");
  const int c = seg.dim(0), h = seg.dim(1), w = seg.dim(2);
  const detail::InverseAffine inv(p, h, w);
  Mask valid(h, w);
  std::vector<T> out(seg.numel(), T(0));
  const auto& src = seg.values();
  const size_t plane = static_cast<size_t>(h) * w;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double xs, ys;
      inv.map(j, i, xs, ys);
      if (xs < 0 || xs > w - 1 || ys < 0 || ys > h - 1) continue;
      valid.set(i, j, 1);
      const int xn = std::min(std::max<int>(0, static_cast<int>(std::lround(xs))), w - 1);
      const int yn = std::min(std::max<int>(0, static_cast<int>(std::lround(ys))), h - 1);
      for (int ch = 0; ch < c; ++ch)
        out[ch * plane + static_cast<size_t>(i) * w + j] = src[ch * plane + static_cast<size_t>(yn) * w + xn];
    }
  return {TensorT<T>::from_data(seg.shape(), std::move(out)), std::move(valid)};
}

// Ground-truth variant: invalid pixels take ignore_label so they drop out
// of the supervised loss.
inline ClassMap apply_affine_classmap(const ClassMap& gt, const AffineParams& p, uint8_t ignore_label = 255) {
  const detail::InverseAffine inv(p, gt.h, gt.w);
  ClassMap out(gt.h, gt.w, ignore_label);
  for (int i = 0; i < gt.h; ++i)
    for (int j = 0; j < gt.w; ++j) {
      double xs, ys;
      inv.map(j, i, xs, ys);
      if (xs < 0 || xs > gt.w - 1 || ys < 0 || ys > gt.h - 1) continue;
      const int xn = std::min(std::max<int>(0, static_cast<int>(std::lround(xs))), gt.w - 1);
      const int yn = std::min(std::max<int>(0, static_cast<int>(std::lround(ys))), gt.h - 1);
      out.set(i, j, gt.at(yn, xn));
    }
  return out;
}

// ---- colour jitter ----------------------------------------------------------

struct ColourParams {
  double brightness = 1, contrast = 1, saturation = 1;
  double hue = 0;  // turns, |hue| <= 0.5
  std::array<int, 4> op_order = {0, 1, 2, 3};  // 0=brightness 1=contrast 2=saturation 3=hue
};

struct ColourRanges {
  double brightness = 0, contrast = 0, saturation = 0;  // factor jitter in [0,1)
  double hue = 0;                                       // max |shift| in turns, <= 0.5
};

inline void validate(const ColourRanges& r) {
  if (r.brightness < 0 || r.brightness >= 1 || r.contrast < 0 || r.contrast >= 1 || r.saturation < 0 ||
      r.saturation >= 1)
    throw ConfigError("colour ranges: factor magnitudes must lie in [0,1)");
  if (r.hue < 0 || r.hue > 0.5) throw ConfigError("colour ranges: hue magnitude must lie in [0,0.5]");
}

inline ColourParams sample_colour(Rng& rng, const ColourRanges& r) {
  validate(r);
  ColourParams p;
  p.brightness = std::max(rng.uniform(1 - r.brightness, 1 + r.brightness), 1e-9);
  p.contrast = rng.uniform(1 - r.contrast, 1 + r.contrast);
  p.saturation = rng.uniform(1 - r.saturation, 1 + r.saturation);
  p.hue = rng.uniform(-r.hue, r.hue);
  rng.shuffle(p.op_order.begin(), p.op_order.end());
  return p;
}

namespace detail {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx <= 0 ? 0 : d / mx;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == r)
    h = (g - b) / d;
  else if (mx == g)
    h = (b - r) / d + 2;
  else
    h = (r - g) / d + 4;
  h /= 6;
  if (h < 0) h += 1;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  if (s <= 0) {
    r = g = b = v;
    return;
  }
  const double h6 = h * 6;
  const int sector = std::min(5, static_cast<int>(std::floor(h6)));
  const double f = h6 - sector;
  const double p = v * (1 - s);
  const double q = v * (1 - s * f);
  const double t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

inline double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

inline double clamp01(double v) { return v < 0 ? 0 : (v > 1 ? 1 : v); }

}  // namespace detail

// Applies the four jitter ops in p.op_order. Output stays in [0,1].
template <class T>
inline TensorT<T> apply_colour(const TensorT<T>& image, const ColourParams& p) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("apply_colour: expected RGB [3,H,W]");
  const size_t plane = static_cast<size_t>(image.dim(1)) * image.dim(2);
  for (T v : image.values())
    if (v < T(-1e-6) || v > T(1) + T(1e-6))
      throw DataError("apply_colour: input values outside [0,1]");

  std::vector<double> r(plane), g(plane), b(plane);
  const auto& src = image.values();
  for (size_t i = 0; i < plane; ++i) {
    r[i] = detail::clamp01(static_cast<double>(src[i]));
    g[i] = detail::clamp01(static_cast<double>(src[plane + i]));
    b[i] = detail::clamp01(static_cast<double>(src[2 * plane + i]));
  }

  for (int op : p.op_order) {
    switch (op) {
      case 0:
        for (size_t i = 0; i < plane; ++i) {
          r[i] = detail::clamp01(p.brightness * r[i]);
          g[i] = detail::clamp01(p.brightness * g[i]);
          b[i] = detail::clamp01(p.brightness * b[i]);
        }
        break;
      case 1: {
        double mean_lum = 0;
        for (size_t i = 0; i < plane; ++i) mean_lum += detail::luminance(r[i], g[i], b[i]);
        mean_lum /= static_cast<double>(plane);
        const double base = (1 - p.contrast) * mean_lum;
        for (size_t i = 0; i < plane; ++i) {
          r[i] = detail::clamp01(p.contrast * r[i] + base);
          g[i] = detail::clamp01(p.contrast * g[i] + base);
          b[i] = detail::clamp01(p.contrast * b[i] + base);
        }
        break;
      }
      case 2:
        for (size_t i = 0; i < plane; ++i) {
          const double lum = detail::luminance(r[i], g[i], b[i]);
          const double base = (1 - p.saturation) * lum;
          r[i] = detail::clamp01(p.saturation * r[i] + base);
          g[i] = detail::clamp01(p.saturation * g[i] + base);
          b[i] = detail::clamp01(p.saturation * b[i] + base);
        }
        break;
      case 3:
        if (p.hue != 0) {
          for (size_t i = 0; i < plane; ++i) {
            double h, s, v;
            detail::rgb_to_hsv(r[i], g[i], b[i], h, s, v);
            h = std::fmod(h + p.hue + 1.0, 1.0);
            detail::hsv_to_rgb(h, s, v, r[i], g[i], b[i]);
          }
        }
        break;
      default:
        throw ConfigError("apply_colour: unknown op id " + std::to_string(op));
    }
  }

  std::vector<T> out(3 * plane);
  for (size_t i = 0; i < plane; ++i) {
    out[i] = static_cast<T>(r[i]);
    out[plane + i] = static_cast<T>(g[i]);
    out[2 * plane + i] = static_cast<T>(b[i]);
  }
  return TensorT<T>::from_data(image.shape(), std::move(out));
}

// ---- box masks, mixing ------------------------------------------------------

struct MixMask {
  Mask mask;        // 1 inside the rectangle
  int x0 = 0, y0 = 0, bw = 0, bh = 0;
};

// Axis-aligned rectangle of area round(nu*H*W), aspect ratio log-uniform in
// [1/2, 2], position uniform among placements that fit entirely inside.
// Side rounding is repaired by a +-1 search so the area is met exactly
// whenever some h x w with both sides in range does.
inline MixMask sample_box_mask(Rng& rng, int h, int w, double nu = 0.5) {
  if (h < 1 || w < 1) throw ConfigError("sample_box_mask: empty image");
  if (!(nu > 0) || !(nu < 1)) throw ConfigError("sample_box_mask: area ratio must lie in (0,1)");
  const long target = std::lround(nu * h * w);
  if (target < 1) throw ConfigError("sample_box_mask: nu*H*W < 1");

  const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
  long bh = std::lround(std::sqrt(static_cast<double>(target) * aspect));
  bh = std::clamp(bh, 1L, static_cast<long>(h));
  long bw = std::lround(static_cast<double>(target) / static_cast<double>(bh));
  bw = std::clamp(bw, 1L, static_cast<long>(w));

  long best_h = bh, best_w = bw;
  long best_err = std::labs(bh * bw - target);
  for (long dh = -1; dh <= 1; ++dh)
    for (long dw = -1; dw <= 1; ++dw) {
      const long hh = bh + dh, ww = bw + dw;
      if (hh < 1 || hh > h || ww < 1 || ww > w) continue;
      const long err = std::labs(hh * ww - target);
      if (err < best_err) {
        best_err = err;
        best_h = hh;
        best_w = ww;
      }
    }

  MixMask m;
  m.bh = static_cast<int>(best_h);
  m.bw = static_cast<int>(best_w);
  m.x0 = rng.uniform_int(0, w - m.bw);
  m.y0 = rng.uniform_int(0, h - m.bh);
  m.mask = Mask(h, w);
  for (int i = 0; i < m.bh; ++i)
    for (int j = 0; j < m.bw; ++j) m.mask.set(m.y0 + i, m.x0 + j, 1);
  return m;
}

// x_m = a .(1-m) + b .m, the mask broadcast over channels
template <class T>
inline TensorT<T> mix(const TensorT<T>& a, const TensorT<T>& b, const MixMask& m) {
  detail::check_same_shape(a, b, "mix");
  if (a.rank() != 3 || a.dim(1) != m.mask.h || a.dim(2) != m.mask.w)
    throw ShapeError("mix: mask does not match image shape");
  const int c = a.dim(0);
  const size_t plane = static_cast<size_t>(m.mask.h) * m.mask.w;
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < plane; ++i) {
      const T mm = static_cast<T>(m.mask.v[i]);
      out[ch * plane + i] = av[ch * plane + i] * (T(1) - mm) + bv[ch * plane + i] * mm;
    }
  return TensorT<T>::from_data(a.shape(), std::move(out));
}

// masked region replaced by per-channel fill, elsewhere untouched
template <class T>
inline TensorT<T> cutout_apply(const TensorT<T>& image, const MixMask& m, const std::array<T, 3>& fill) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != m.mask.h || image.dim(2) != m.mask.w)
    throw ShapeError("cutout_apply: mask does not match RGB image shape");
  const size_t plane = static_cast<size_t>(m.mask.h) * m.mask.w;
  std::vector<T> out = image.values();
  for (int ch = 0; ch < 3; ++ch)
    for (size_t i = 0; i < plane; ++i)
      if (m.mask.v[i]) out[ch * plane + i] = fill[static_cast<size_t>(ch)];
  return TensorT<T>::from_data(image.shape(), std::move(out));
}

// lambda*a + (1-lambda)*b
template <class T>
inline TensorT<T> ict_mix(const TensorT<T>& a, const TensorT<T>& b, double lambda) {
  detail::check_same_shape(a, b, "ict_mix");
  if (!(lambda >= 0 && lambda <= 1)) throw ConfigError("ict_mix: lambda must lie in [0,1]");
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  const T l = static_cast<T>(lambda);
  for (size_t i = 0; i < out.size(); ++i) out[i] = l * av[i] + (T(1) - l) * bv[i];
  return TensorT<T>::from_data(a.shape(), std::move(out));
}

// ---- VAT adversarial direction ----------------------------------------------

struct VatConfig {
  double xi_scale = 1e-6;  // xi = xi_scale * sqrt(pixel count)
  int n_power = 1;
  double epsilon = 1.0;
};

namespace detail {

// restores parameter grad tracking on scope exit
template <class T>
struct ParamFreeze {
  explicit ParamFreeze(SegNetworkT<T>& net) : net_(net) {
    for (auto* p : net.params()) {
      saved_.push_back(p->requires_grad());
      p->set_requires_grad(false);
    }
  }
  ~ParamFreeze() {
    auto ps = net_.params();
    for (size_t i = 0; i < ps.size(); ++i) ps[i]->set_requires_grad(saved_[i]);
  }
  SegNetworkT<T>& net_;
  std::vector<bool> saved_;
};

template <class T>
inline TensorT<T> random_unit(Rng& rng, const std::vector<int>& shape, size_t numel) {
  for (int attempt = 0; attempt < 8; ++attempt) {
    std::vector<T> d(numel);
    for (auto& v : d) v = static_cast<T>(rng.normal(0.0, 1.0));
    double norm = 0;
    for (T v : d) norm += static_cast<double>(v) * static_cast<double>(v);
    norm = std::sqrt(norm);
    if (norm > 1e-12) {
      for (auto& v : d) v = static_cast<T>(static_cast<double>(v) / norm);
      return TensorT<T>::from_data(shape, std::move(d));
    }
  }
  throw NumericError("vat_direction: could not draw a nonzero direction");
}

}  // namespace detail

// Power iteration for the direction that maximally bends the prediction:
// d <- normalize(grad_d KL(p(x) || p(x + xi*d))), repeated n_power times,
// then scaled to L2 norm epsilon. Network parameters receive no gradient.
template <class T>
inline TensorT<T> vat_direction(SegNetworkT<T>& student, const TensorT<T>& x, const VatConfig& cfg, Rng& rng) {
  if (x.rank() != 3) throw ShapeError("vat_direction: expected [C,H,W]");
  if (cfg.xi_scale <= 0 || cfg.n_power < 0 || cfg.epsilon < 0)
    throw ConfigError("vat_direction: need xi_scale > 0, n_power >= 0, epsilon >= 0");
  const std::vector<int> batch_shape = {1, x.dim(0), x.dim(1), x.dim(2)};
  const double xi = cfg.xi_scale * std::sqrt(static_cast<double>(x.dim(1)) * x.dim(2));

  TensorT<T> d = detail::random_unit<T>(rng, x.shape(), x.numel());

  detail::ParamFreeze<T> freeze(student);
  TensorT<T> p_ref;
  {
    NoGradGuard ng;
    p_ref = softmax_channels(student.forward(reshape(x, batch_shape)));
  }
  const TensorT<T> x_plain = x.detach();

  for (int iter = 0; iter < cfg.n_power; ++iter) {
    d.set_requires_grad(true);
    auto xp = add(reshape(x_plain, batch_shape), mul_scalar(reshape(d, batch_shape), static_cast<T>(xi)));
    auto loss = kl_mean_from_logits(student.forward(xp), p_ref);
    backward(loss);
    const auto& g = d.grad();
    double norm = 0;
    for (T v : g) norm += static_cast<double>(v) * static_cast<double>(v);
    norm = std::sqrt(norm);
    if (norm > 1e-12) {
      std::vector<T> nd(g.size());
      for (size_t i = 0; i < nd.size(); ++i) nd[i] = static_cast<T>(static_cast<double>(g[i]) / norm);
      d = TensorT<T>::from_data(x.shape(), std::move(nd));
    } else {
      d = detail::random_unit<T>(rng, x.shape(), x.numel());
    }
  }

  std::vector<T> r(d.numel());
  const auto& dv = d.values();
  for (size_t i = 0; i < r.size(); ++i) r[i] = static_cast<T>(static_cast<double>(dv[i]) * cfg.epsilon);
  return TensorT<T>::from_data(x.shape(), std::move(r));
}

}  // namespace coseg

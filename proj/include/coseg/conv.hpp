#pragma once

#include <Eigen/Core>

#include <cmath>

#include "coseg/tensor.hpp"

namespace coseg {

// Spatial network ops on NCHW tensors.
//
// conv2d lowers each image to a column matrix (im2col) and runs one GEMM
// per batch item: out = W_mat * cols + b. The column matrix is recomputed
// in the backward pass instead of being stored, trading FLOPs for memory.

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
inline void check_rank4(const TensorT<T>& x, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected NCHW tensor, got rank " + std::to_string(x.rank()));
}

// cols is (Cin*kh*kw) x (Hout*Wout), row-major; out-of-image taps read zero.
template <class T>
inline void im2col(const T* img, int cin, int h, int w, int kh, int kw, int stride, int pad,
                   int hout, int wout, T* cols) {
  const int ncols = hout * wout;
  for (int c = 0; c < cin; ++c) {
    const T* plane = img + static_cast<size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = cols + static_cast<size_t>((c * kh + ki) * kw + kj) * ncols;
        for (int oi = 0; oi < hout; ++oi) {
          const int si = oi * stride - pad + ki;
          T* dst = row + static_cast<size_t>(oi) * wout;
          if (si < 0 || si >= h) {
            std::fill(dst, dst + wout, T(0));
            continue;
          }
          const T* src = plane + static_cast<size_t>(si) * w;
          for (int oj = 0; oj < wout; ++oj) {
            const int sj = oj * stride - pad + kj;
            dst[oj] = (sj >= 0 && sj < w) ? src[sj] : T(0);
          }
        }
      }
    }
  }
}

// adjoint of im2col: scatter-add columns back into the image
template <class T>
inline void col2im(const T* cols, int cin, int h, int w, int kh, int kw, int stride, int pad,
                   int hout, int wout, T* img) {
  const int ncols = hout * wout;
  for (int c = 0; c < cin; ++c) {
    T* plane = img + static_cast<size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = cols + static_cast<size_t>((c * kh + ki) * kw + kj) * ncols;
        for (int oi = 0; oi < hout; ++oi) {
          const int si = oi * stride - pad + ki;
          if (si < 0 || si >= h) continue;
          T* dst = plane + static_cast<size_t>(si) * w;
          const T* src = row + static_cast<size_t>(oi) * wout;
          for (int oj = 0; oj < wout; ++oj) {
            const int sj = oj * stride - pad + kj;
            if (sj >= 0 && sj < w) dst[sj] += src[oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout]. Zero padding.
template <class T>
inline TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride = 1,
                         int pad = 0) {
  detail::check_rank4(x, "conv2d");
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin,kh,kw]");
  if (b.rank() != 1 || b.dim(0) != w.dim(0)) throw ShapeError("conv2d: bias must be [Cout]");
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                     std::to_string(w.dim(1)));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d: pad must be >= 0");

  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int hout = (h + 2 * pad - kh) / stride + 1;
  const int wout = (wd + 2 * pad - kw) / stride + 1;
  if (hout < 1 || wout < 1)
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " does not fit input " + std::to_string(h) + "x" + std::to_string(wd));

  const int k = cin * kh * kw;
  const int ncols = hout * wout;
  std::vector<T> out(static_cast<size_t>(n) * cout * ncols);
  std::vector<T> cols(static_cast<size_t>(k) * ncols);

  Eigen::Map<const detail::RowMat<T>> wm(w.values().data(), cout, k);
  const size_t img_sz = static_cast<size_t>(cin) * h * wd;
  const size_t out_sz = static_cast<size_t>(cout) * ncols;
  for (int i = 0; i < n; ++i) {
    detail::im2col(x.values().data() + i * img_sz, cin, h, wd, kh, kw, stride, pad, hout, wout, cols.data());
    Eigen::Map<const detail::RowMat<T>> cm(cols.data(), k, ncols);
    Eigen::Map<detail::RowMat<T>> om(out.data() + i * out_sz, cout, ncols);
    om.noalias() = wm * cm;
    for (int c = 0; c < cout; ++c) om.row(c).array() += b.values()[static_cast<size_t>(c)];
  }

  auto px = x.node(), pw = w.node(), pb = b.node();
  return detail::make_op<T>(
      {n, cout, hout, wout}, std::move(out), {px, pw, pb},
      [px, pw, pb, n, cin, h, wd, cout, kh, kw, stride, pad, hout, wout](const typename TensorT<T>::Node& self) {
        const int k = cin * kh * kw;
        const int ncols = hout * wout;
        const size_t img_sz = static_cast<size_t>(cin) * h * wd;
        const size_t out_sz = static_cast<size_t>(cout) * ncols;
        std::vector<T> cols(static_cast<size_t>(k) * ncols);

        if (pb->requires_grad) {
          auto& gb = detail::ensure_grad<T>(*pb);
          for (int i = 0; i < n; ++i) {
            const T* dy = self.grad.data() + i * out_sz;
            for (int c = 0; c < cout; ++c) {
              T acc = T(0);
              const T* row = dy + static_cast<size_t>(c) * ncols;
              for (int j = 0; j < ncols; ++j) acc += row[j];
              gb[static_cast<size_t>(c)] += acc;
            }
          }
        }
        if (pw->requires_grad) {
          auto& gw = detail::ensure_grad<T>(*pw);
          Eigen::Map<detail::RowMat<T>> gwm(gw.data(), cout, k);
          for (int i = 0; i < n; ++i) {
            detail::im2col(px->data.data() + i * img_sz, cin, h, wd, kh, kw, stride, pad, hout, wout,
                           cols.data());
            Eigen::Map<const detail::RowMat<T>> cm(cols.data(), k, ncols);
            Eigen::Map<const detail::RowMat<T>> dym(self.grad.data() + i * out_sz, cout, ncols);
            gwm.noalias() += dym * cm.transpose();
          }
        }
        if (px->requires_grad) {
          auto& gx = detail::ensure_grad<T>(*px);
          Eigen::Map<const detail::RowMat<T>> wm(pw->data.data(), cout, k);
          for (int i = 0; i < n; ++i) {
            Eigen::Map<const detail::RowMat<T>> dym(self.grad.data() + i * out_sz, cout, ncols);
            Eigen::Map<detail::RowMat<T>> cm(cols.data(), k, ncols);
            cm.noalias() = wm.transpose() * dym;
            detail::col2im(cols.data(), cin, h, wd, kh, kw, stride, pad, hout, wout, gx.data() + i * img_sz);
          }
        }
      });
}

// [N,C,H,W] -> [N,C,2H,2W]; each source pixel is copied into a 2x2 block.
template <class T>
inline TensorT<T> upsample_nearest2x(const TensorT<T>& x) {
  detail::check_rank4(x, "upsample_nearest2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> out(static_cast<size_t>(n) * c * 4 * h * w);
  const auto& xv = x.values();
  for (int p = 0; p < n * c; ++p) {
    const T* src = xv.data() + static_cast<size_t>(p) * h * w;
    T* dst = out.data() + static_cast<size_t>(p) * 4 * h * w;
    for (int i = 0; i < h; ++i) {
      T* r0 = dst + static_cast<size_t>(2 * i) * 2 * w;
      T* r1 = r0 + 2 * w;
      for (int j = 0; j < w; ++j) {
        T v = src[static_cast<size_t>(i) * w + j];
        r0[2 * j] = r0[2 * j + 1] = r1[2 * j] = r1[2 * j + 1] = v;
      }
    }
  }
  auto px = x.node();
  return detail::make_op<T>({n, c, 2 * h, 2 * w}, std::move(out), {px},
                            [px, n, c, h, w](const typename TensorT<T>::Node& self) {
                              if (!px->requires_grad) return;
                              auto& gx = detail::ensure_grad<T>(*px);
                              for (int p = 0; p < n * c; ++p) {
                                T* dst = gx.data() + static_cast<size_t>(p) * h * w;
                                const T* g = self.grad.data() + static_cast<size_t>(p) * 4 * h * w;
                                for (int i = 0; i < h; ++i) {
                                  const T* r0 = g + static_cast<size_t>(2 * i) * 2 * w;
                                  const T* r1 = r0 + 2 * w;
                                  for (int j = 0; j < w; ++j)
                                    dst[static_cast<size_t>(i) * w + j] +=
                                        r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1];
                                }
                              }
                            });
}

// y[n,:,:,:] = (x[n,:,:,:] - mean) / sqrt(var + eps); mean and biased var
// taken per sample over all of C,H,W. Statistics depend on the sample
// alone, so evaluation is batch-composition independent. Normalizing across
// channels keeps the statistics meaningful even on 1x1 spatial planes,
// where a per-channel variance would vanish identically.
template <class T>
inline TensorT<T> sample_norm(const TensorT<T>& x, double eps = 1e-5) {
  detail::check_rank4(x, "sample_norm");
  const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2) * x.dim(3);
  const size_t groups = static_cast<size_t>(x.dim(0));
  const auto& xv = x.values();
  std::vector<T> out(x.numel());
  std::vector<T> mu(groups), inv(groups);
  for (size_t g = 0; g < groups; ++g) {
    const T* src = xv.data() + g * plane;
    T m = T(0);
    for (size_t j = 0; j < plane; ++j) m += src[j];
    m /= static_cast<T>(plane);
    T v = T(0);
    for (size_t j = 0; j < plane; ++j) {
      const T d = src[j] - m;
      v += d * d;
    }
    v /= static_cast<T>(plane);
    mu[g] = m;
    inv[g] = T(1) / std::sqrt(v + static_cast<T>(eps));
    T* dst = out.data() + g * plane;
    for (size_t j = 0; j < plane; ++j) dst[j] = (src[j] - m) * inv[g];
  }
  auto px = x.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {px},
      [px, mu = std::move(mu), inv = std::move(inv), groups,
       plane](const typename TensorT<T>::Node& self) {
        if (!px->requires_grad) return;
        auto& gx = detail::ensure_grad<T>(*px);
        for (size_t g = 0; g < groups; ++g) {
          const T* src = px->data.data() + g * plane;
          const T* go = self.grad.data() + g * plane;
          T gsum = T(0), gdot = T(0);
          for (size_t j = 0; j < plane; ++j) {
            gsum += go[j];
            gdot += go[j] * (src[j] - mu[g]) * inv[g];
          }
          const T gmean = gsum / static_cast<T>(plane);
          const T gproj = gdot / static_cast<T>(plane);
          T* dst = gx.data() + g * plane;
          for (size_t j = 0; j < plane; ++j) {
            const T xhat = (src[j] - mu[g]) * inv[g];
            dst[j] += inv[g] * (go[j] - gmean - xhat * gproj);
          }
        }
      });
}

// y[n,c,h,w] = x[n,c,h,w] * scale[c] + shift[c]
template <class T>
inline TensorT<T> channel_affine(const TensorT<T>& x, const TensorT<T>& scale, const TensorT<T>& shift) {
  detail::check_rank4(x, "channel_affine");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (scale.rank() != 1 || scale.dim(0) != c || shift.rank() != 1 || shift.dim(0) != c)
    throw ShapeError("channel_affine: scale/shift must be [C] with C=" + std::to_string(c));
  const size_t plane = static_cast<size_t>(h) * w;
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T s = scale.values()[static_cast<size_t>(ch)];
      const T t = shift.values()[static_cast<size_t>(ch)];
      const size_t off = (static_cast<size_t>(i) * c + ch) * plane;
      for (size_t j = 0; j < plane; ++j) out[off + j] = xv[off + j] * s + t;
    }
  auto px = x.node(), ps = scale.node(), pt = shift.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {px, ps, pt},
      [px, ps, pt, n, c, plane](const typename TensorT<T>::Node& self) {
        if (px->requires_grad) {
          auto& gx = detail::ensure_grad<T>(*px);
          for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
              const T s = ps->data[static_cast<size_t>(ch)];
              const size_t off = (static_cast<size_t>(i) * c + ch) * plane;
              for (size_t j = 0; j < plane; ++j) gx[off + j] += self.grad[off + j] * s;
            }
        }
        if (ps->requires_grad) {
          auto& gs = detail::ensure_grad<T>(*ps);
          for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
              const size_t off = (static_cast<size_t>(i) * c + ch) * plane;
              T acc = T(0);
              for (size_t j = 0; j < plane; ++j) acc += self.grad[off + j] * px->data[off + j];
              gs[static_cast<size_t>(ch)] += acc;
            }
        }
        if (pt->requires_grad) {
          auto& gt = detail::ensure_grad<T>(*pt);
          for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
              const size_t off = (static_cast<size_t>(i) * c + ch) * plane;
              T acc = T(0);
              for (size_t j = 0; j < plane; ++j) acc += self.grad[off + j];
              gt[static_cast<size_t>(ch)] += acc;
            }
        }
      });
}

}  // namespace coseg

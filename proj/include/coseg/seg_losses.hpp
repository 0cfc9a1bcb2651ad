#pragma once

#include <cmath>

#include "coseg/conv.hpp"
#include "coseg/tensor.hpp"

namespace coseg {

// Segmentation losses over NCHW logit tensors.
//
// The losses are fused ops: forward and adjoint are computed in closed form
// per pixel rather than composed from primitives, which keeps graphs small
// and gives numerically stable log-sum-exp paths.
//
// Validity masks are flattened [N,H,W] uint8 rows (nonzero = valid). A null
// mask means every pixel is valid.

namespace detail {
template <class T>
inline void check_pixel_mask(const TensorT<T>& x, const std::vector<uint8_t>* mask, const char* op) {
  if (mask && mask->size() != static_cast<size_t>(x.dim(0)) * x.dim(2) * x.dim(3))
    throw ShapeError(std::string(op) + ": mask has " + std::to_string(mask->size()) +
                     " entries, expected N*H*W = " +
                     std::to_string(static_cast<size_t>(x.dim(0)) * x.dim(2) * x.dim(3)));
}
}  // namespace detail

// Softmax across the channel dimension, independently per (n,h,w).
template <class T>
inline TensorT<T> softmax_channels(const TensorT<T>& x) {
  detail::check_rank4(x, "softmax_channels");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t img = static_cast<size_t>(c) * plane;
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (int i = 0; i < n; ++i)
    for (size_t p = 0; p < plane; ++p) {
      const size_t base = i * img + p;
      T m = xv[base];
      for (int ch = 1; ch < c; ++ch) m = std::max(m, xv[base + ch * plane]);
      T z = T(0);
      for (int ch = 0; ch < c; ++ch) {
        T e = std::exp(xv[base + ch * plane] - m);
        out[base + ch * plane] = e;
        z += e;
      }
      const T inv = T(1) / z;
      for (int ch = 0; ch < c; ++ch) out[base + ch * plane] *= inv;
    }
  auto px = x.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {px}, [px, n, c, plane, img](const typename TensorT<T>::Node& self) {
        if (!px->requires_grad) return;
        auto& gx = detail::ensure_grad<T>(*px);
        // dx_c = p_c * (dy_c - sum_k dy_k p_k)
        for (int i = 0; i < n; ++i)
          for (size_t p = 0; p < plane; ++p) {
            const size_t base = i * img + p;
            T dot = T(0);
            for (int ch = 0; ch < c; ++ch) dot += self.grad[base + ch * plane] * self.data[base + ch * plane];
            for (int ch = 0; ch < c; ++ch) {
              const size_t k = base + ch * plane;
              gx[k] += self.data[k] * (self.grad[k] - dot);
            }
          }
      });
}

// Mean negative log-likelihood over pixels whose label != ignore_label.
// labels is flattened [N,H,W]. Throws DataError when a label is out of range
// or when every pixel is ignored.
template <class T>
inline TensorT<T> cross_entropy_seg(const TensorT<T>& logits, const std::vector<uint8_t>& labels,
                                    uint8_t ignore_label = 255) {
  detail::check_rank4(logits, "cross_entropy_seg");
  const int n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t img = static_cast<size_t>(c) * plane;
  if (labels.size() != static_cast<size_t>(n) * plane)
    throw ShapeError("cross_entropy_seg: labels has " + std::to_string(labels.size()) +
                     " entries, expected N*H*W = " + std::to_string(static_cast<size_t>(n) * plane));

  const auto& xv = logits.values();
  double acc = 0;
  size_t n_valid = 0;
  for (int i = 0; i < n; ++i)
    for (size_t p = 0; p < plane; ++p) {
      const uint8_t y = labels[i * plane + p];
      if (y == ignore_label) continue;
      if (y >= c)
        throw DataError("cross_entropy_seg: label " + std::to_string(int(y)) + " out of range for " +
                        std::to_string(c) + " classes");
      const size_t base = i * img + p;
      T m = xv[base];
      for (int ch = 1; ch < c; ++ch) m = std::max(m, xv[base + ch * plane]);
      T z = T(0);
      for (int ch = 0; ch < c; ++ch) z += std::exp(xv[base + ch * plane] - m);
      acc += static_cast<double>(m) + std::log(static_cast<double>(z)) -
             static_cast<double>(xv[base + y * plane]);
      ++n_valid;
    }
  if (n_valid == 0) throw DataError("cross_entropy_seg: every pixel carries the ignore label");
  const T loss = static_cast<T>(acc / static_cast<double>(n_valid));

  auto px = logits.node();
  const uint8_t ign = ignore_label;
  std::vector<uint8_t> lab = labels;  // keep alive for backward
  return detail::make_op<T>(
      {1}, {loss}, {px},
      [px, lab = std::move(lab), ign, n, c, plane, img, n_valid](const typename TensorT<T>::Node& self) {
        if (!px->requires_grad) return;
        auto& gx = detail::ensure_grad<T>(*px);
        const T go = self.grad[0] / static_cast<T>(n_valid);
        for (int i = 0; i < n; ++i)
          for (size_t p = 0; p < plane; ++p) {
            const uint8_t y = lab[i * plane + p];
            if (y == ign) continue;
            const size_t base = i * img + p;
            T m = px->data[base];
            for (int ch = 1; ch < c; ++ch) m = std::max(m, px->data[base + ch * plane]);
            T z = T(0);
            for (int ch = 0; ch < c; ++ch) z += std::exp(px->data[base + ch * plane] - m);
            const T inv = T(1) / z;
            for (int ch = 0; ch < c; ++ch) {
              const size_t k = base + ch * plane;
              T soft = std::exp(px->data[k] - m) * inv;
              gx[k] += go * (soft - (ch == y ? T(1) : T(0)));
            }
          }
      });
}

// Mean of (student - target)^2 over valid pixels and all channels.
// target is read as plain values: gradient flows only into student.
// With zero valid pixels the result is a constant 0 with no graph.
template <class T>
inline TensorT<T> masked_mse_mean(const TensorT<T>& student, const TensorT<T>& target,
                                  const std::vector<uint8_t>* mask = nullptr) {
  detail::check_rank4(student, "masked_mse_mean");
  detail::check_same_shape(student, target, "masked_mse_mean");
  detail::check_pixel_mask(student, mask, "masked_mse_mean");
  const int n = student.dim(0), c = student.dim(1), h = student.dim(2), w = student.dim(3);
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t img = static_cast<size_t>(c) * plane;

  size_t n_valid = 0;
  if (mask) {
    for (uint8_t m : *mask) n_valid += m ? 1 : 0;
  } else {
    n_valid = static_cast<size_t>(n) * plane;
  }
  if (n_valid == 0) return TensorT<T>::scalar_tensor(T(0));

  const auto& sv = student.values();
  const auto& tv = target.values();
  double acc = 0;
  for (int i = 0; i < n; ++i)
    for (size_t p = 0; p < plane; ++p) {
      if (mask && !(*mask)[i * plane + p]) continue;
      const size_t base = i * img + p;
      for (int ch = 0; ch < c; ++ch) {
        const double d = static_cast<double>(sv[base + ch * plane]) - static_cast<double>(tv[base + ch * plane]);
        acc += d * d;
      }
    }
  const size_t denom = n_valid * static_cast<size_t>(c);
  const T loss = static_cast<T>(acc / static_cast<double>(denom));

  auto ps = student.node();
  std::vector<T> tgt = target.values();  // snapshot; target carries no grad
  std::vector<uint8_t> msk = mask ? *mask : std::vector<uint8_t>{};
  return detail::make_op<T>(
      {1}, {loss}, {ps},
      [ps, tgt = std::move(tgt), msk = std::move(msk), n, c, plane, img, denom](
          const typename TensorT<T>::Node& self) {
        if (!ps->requires_grad) return;
        auto& gs = detail::ensure_grad<T>(*ps);
        const T go = self.grad[0] * T(2) / static_cast<T>(denom);
        for (int i = 0; i < n; ++i)
          for (size_t p = 0; p < plane; ++p) {
            if (!msk.empty() && !msk[i * plane + p]) continue;
            const size_t base = i * img + p;
            for (int ch = 0; ch < c; ++ch) {
              const size_t k = base + ch * plane;
              gs[k] += go * (ps->data[k] - tgt[k]);
            }
          }
      });
}

// Mean over valid pixels of KL(p || softmax(logits)), p held constant.
// Terms with p=0 contribute zero. dlogits = (softmax - p) / n_valid.
template <class T>
inline TensorT<T> kl_mean_from_logits(const TensorT<T>& logits, const TensorT<T>& target_probs,
                                      const std::vector<uint8_t>* mask = nullptr) {
  detail::check_rank4(logits, "kl_mean_from_logits");
  detail::check_same_shape(logits, target_probs, "kl_mean_from_logits");
  detail::check_pixel_mask(logits, mask, "kl_mean_from_logits");
  const int n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t img = static_cast<size_t>(c) * plane;

  size_t n_valid = 0;
  if (mask) {
    for (uint8_t m : *mask) n_valid += m ? 1 : 0;
  } else {
    n_valid = static_cast<size_t>(n) * plane;
  }
  if (n_valid == 0) return TensorT<T>::scalar_tensor(T(0));

  const auto& xv = logits.values();
  const auto& pv = target_probs.values();
  double acc = 0;
  for (int i = 0; i < n; ++i)
    for (size_t p = 0; p < plane; ++p) {
      if (mask && !(*mask)[i * plane + p]) continue;
      const size_t base = i * img + p;
      T m = xv[base];
      for (int ch = 1; ch < c; ++ch) m = std::max(m, xv[base + ch * plane]);
      T z = T(0);
      for (int ch = 0; ch < c; ++ch) z += std::exp(xv[base + ch * plane] - m);
      const double lse = static_cast<double>(m) + std::log(static_cast<double>(z));
      for (int ch = 0; ch < c; ++ch) {
        const double pc = static_cast<double>(pv[base + ch * plane]);
        if (pc <= 0) continue;
        const double log_q = static_cast<double>(xv[base + ch * plane]) - lse;
        acc += pc * (std::log(pc) - log_q);
      }
    }
  const T loss = static_cast<T>(acc / static_cast<double>(n_valid));

  auto px = logits.node();
  std::vector<T> tgt = target_probs.values();
  std::vector<uint8_t> msk = mask ? *mask : std::vector<uint8_t>{};
  return detail::make_op<T>(
      {1}, {loss}, {px},
      [px, tgt = std::move(tgt), msk = std::move(msk), n, c, plane, img, n_valid](
          const typename TensorT<T>::Node& self) {
        if (!px->requires_grad) return;
        auto& gx = detail::ensure_grad<T>(*px);
        const T go = self.grad[0] / static_cast<T>(n_valid);
        for (int i = 0; i < n; ++i)
          for (size_t p = 0; p < plane; ++p) {
            if (!msk.empty() && !msk[i * plane + p]) continue;
            const size_t base = i * img + p;
            T m = px->data[base];
            for (int ch = 1; ch < c; ++ch) m = std::max(m, px->data[base + ch * plane]);
            T z = T(0);
            for (int ch = 0; ch < c; ++ch) z += std::exp(px->data[base + ch * plane] - m);
            const T inv = T(1) / z;
            for (int ch = 0; ch < c; ++ch) {
              const size_t k = base + ch * plane;
              T soft = std::exp(px->data[k] - m) * inv;
              gx[k] += go * (soft - tgt[k]);
            }
          }
      });
}

}  // namespace coseg

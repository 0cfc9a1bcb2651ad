#pragma once

#include <optional>
#include <utility>

#include "coseg/augment.hpp"
#include "coseg/seg_losses.hpp"
#include "coseg/segnet.hpp"

namespace coseg {

// Consistency objectives over unlabelled images, with a Mean Teacher
// producing the targets. Every loss here returns a scalar whose gradient
// reaches student parameters only: teacher outputs are computed with grad
// recording off, and VAT detaches its reference distribution.
//
// Images are per-sample [C,H,W]; batching is the trainer's job (losses
// average cleanly across samples).

enum class ConsMode { std_aug, cutout, cutmix, ict, vat };
enum class ConsDistance { mean_squared, kl };

inline const char* to_string(ConsMode m) {
  switch (m) {
    case ConsMode::std_aug: return "std_aug";
    case ConsMode::cutout: return "cutout";
    case ConsMode::cutmix: return "cutmix";
    case ConsMode::ict: return "ict";
    case ConsMode::vat: return "vat";
  }
  return "?";
}

inline const char* to_string(ConsDistance d) {
  return d == ConsDistance::mean_squared ? "mean_squared" : "kl";
}

inline ConsMode parse_cons_mode(const std::string& s) {
  if (s == "std_aug") return ConsMode::std_aug;
  if (s == "cutout") return ConsMode::cutout;
  if (s == "cutmix") return ConsMode::cutmix;
  if (s == "ict") return ConsMode::ict;
  if (s == "vat") return ConsMode::vat;
  throw ConfigError("unknown consistency mode '" + s + "' (std_aug|cutout|cutmix|ict|vat)");
}

inline ConsDistance parse_cons_distance(const std::string& s) {
  if (s == "mean_squared") return ConsDistance::mean_squared;
  if (s == "kl") return ConsDistance::kl;
  throw ConfigError("unknown consistency distance '" + s + "' (mean_squared|kl)");
}

struct ConsistencyConfig {
  ConsMode mode = ConsMode::std_aug;
  double gamma = 1.0;
  ConsDistance distance = ConsDistance::mean_squared;
  std::optional<double> confidence_threshold;
  VatConfig vat;
};

// VAT is defined through KL; the squared-probability distance belongs to
// every other mode.
inline void validate(const ConsistencyConfig& cfg) {
  if (cfg.gamma < 0) throw ConfigError("consistency: gamma must be >= 0");
  const ConsDistance expected = cfg.mode == ConsMode::vat ? ConsDistance::kl : ConsDistance::mean_squared;
  if (cfg.distance != expected)
    throw ConfigError(std::string("consistency: mode ") + to_string(cfg.mode) + " requires distance " +
                      to_string(expected));
  if (cfg.confidence_threshold && (*cfg.confidence_threshold < 0 || *cfg.confidence_threshold > 1))
    throw ConfigError("consistency: confidence_threshold must lie in [0,1]");
}

// Weight defaults when the config leaves gamma unset: 1.0 for the mask and
// mixing regularizers, 0.1 for VAT, and the low legacy weights that keep
// std-aug / ICT stable when colour jitter is off.
inline double default_gamma(ConsMode mode, bool colour_enabled) {
  switch (mode) {
    case ConsMode::vat: return 0.1;
    case ConsMode::std_aug: return colour_enabled ? 1.0 : 0.003;
    case ConsMode::ict: return colour_enabled ? 1.0 : 0.01;
    case ConsMode::cutout:
    case ConsMode::cutmix: return 1.0;
  }
  return 1.0;
}

inline ConsDistance default_distance(ConsMode mode) {
  return mode == ConsMode::vat ? ConsDistance::kl : ConsDistance::mean_squared;
}

// Student (theta) and its exponential-moving-average teacher (phi).
template <class T>
struct TeacherStudentT {
  SegNetworkT<T> student;
  SegNetworkT<T> teacher;
  double ema_decay = 0.99;

  static TeacherStudentT create(const ArchDescriptor& arch, uint64_t init_seed, double ema_decay = 0.99) {
    if (ema_decay < 0 || ema_decay >= 1) throw ConfigError("teacher_student: ema_decay must lie in [0,1)");
    TeacherStudentT ts;
    ts.student = SegNetworkT<T>(arch, init_seed);
    ts.teacher = ts.student.clone();
    ts.student.set_requires_grad(true);
    ts.teacher.set_requires_grad(false);
    ts.ema_decay = ema_decay;
    return ts;
  }
};

using TeacherStudent = TeacherStudentT<double>;
using TeacherStudentF = TeacherStudentT<float>;

// phi <- decay*phi + (1-decay)*theta for every parameter pair
template <class T>
inline void ema_update(TeacherStudentT<T>& ts) {
  auto sp = ts.student.named_params();
  auto tp = ts.teacher.named_params();
  if (sp.size() != tp.size()) throw ShapeError("ema_update: parameter sets differ in size");
  const T d = static_cast<T>(ts.ema_decay);
  const T omd = T(1) - d;
  for (size_t i = 0; i < sp.size(); ++i) {
    if (sp[i].first != tp[i].first)
      throw ShapeError("ema_update: parameter name mismatch '" + sp[i].first + "' vs '" + tp[i].first + "'");
    if (sp[i].second->shape() != tp[i].second->shape())
      throw ShapeError("ema_update: parameter '" + sp[i].first + "' differs in shape");
    auto& tv = tp[i].second->values();
    const auto& sv = sp[i].second->values();
    for (size_t k = 0; k < tv.size(); ++k) tv[k] = d * tv[k] + omd * sv[k];
  }
}

// L = L_sup + gamma * L_cons
template <class T>
inline TensorT<T> total_loss(const TensorT<T>& sup, const TensorT<T>& cons, double gamma) {
  if (gamma < 0) throw ConfigError("total_loss: gamma must be >= 0");
  return add(sup, mul_scalar(cons, static_cast<T>(gamma)));
}

namespace detail {

// forward + channel softmax on one image, with grad (student path)
template <class T>
inline TensorT<T> student_probs(SegNetworkT<T>& net, const TensorT<T>& image) {
  auto p = softmax_channels(net.forward(reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)})));
  return reshape(p, {p.dim(1), p.dim(2), p.dim(3)});
}

// forward + channel softmax with recording off (teacher / reference path)
template <class T>
inline TensorT<T> frozen_probs(const SegNetworkT<T>& net, const TensorT<T>& image) {
  NoGradGuard ng;
  auto p = softmax_channels(net.forward(reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)})));
  return reshape(p, {p.dim(1), p.dim(2), p.dim(3)});
}

// drops pixels whose target max-probability is below the threshold
template <class T>
inline void apply_confidence(Mask& valid, const TensorT<T>& target_probs, double threshold) {
  const int c = target_probs.dim(0);
  const size_t plane = static_cast<size_t>(target_probs.dim(1)) * target_probs.dim(2);
  const auto& pv = target_probs.values();
  for (size_t i = 0; i < plane; ++i) {
    if (!valid.v[i]) continue;
    T mx = pv[i];
    for (int ch = 1; ch < c; ++ch) mx = std::max(mx, pv[ch * plane + i]);
    if (static_cast<double>(mx) < threshold) valid.v[i] = 0;
  }
}

}  // namespace detail

// Mean over valid pixels and channels of (student - target)^2. The target
// carries no gradient. No valid pixels -> constant 0.
template <class T>
inline TensorT<T> cons_loss_pair(const TensorT<T>& student_probs, const TensorT<T>& target_probs,
                                 const Mask& valid) {
  if (student_probs.rank() != 3) throw ShapeError("cons_loss_pair: expected [C,H,W]");
  if (valid.h != student_probs.dim(1) || valid.w != student_probs.dim(2))
    throw ShapeError("cons_loss_pair: validity mask does not match map shape");
  const std::vector<int> b4 = {1, student_probs.dim(0), student_probs.dim(1), student_probs.dim(2)};
  return masked_mse_mean(reshape(student_probs, b4), reshape(target_probs.detach(), b4), &valid.v);
}

// Eq-2 style: the teacher sees the clean image; its probability map is
// geometrically transformed to meet the student's view of the transformed
// (and optionally colour-jittered) image.
template <class T>
inline TensorT<T> cons_loss_stdaug(TeacherStudentT<T>& ts, const TensorT<T>& x, const AffineParams& p,
                                   const std::optional<ColourParams>& colour = std::nullopt,
                                   const std::optional<double>& confidence_threshold = std::nullopt) {
  TensorT<T> student_in = colour ? apply_colour(x, *colour) : x;
  auto [xa, valid_img] = apply_affine(student_in, p);
  auto teacher_map = detail::frozen_probs(ts.teacher, x);
  auto [target, valid_map] = apply_affine_map(teacher_map, p);
  Mask valid = valid_img.logical_and(valid_map);  // identical by construction
  if (confidence_threshold) detail::apply_confidence(valid, target, *confidence_threshold);
  return cons_loss_pair(detail::student_probs(ts.student, xa), target, valid);
}

// Teacher maps for both sources are blended by the box mask; the student
// sees the same blend of the inputs (colour jitter, when present, hits each
// source independently on the student path only).
template <class T>
inline TensorT<T> cons_loss_cutmix(TeacherStudentT<T>& ts, const TensorT<T>& x_a, const TensorT<T>& x_b,
                                   const MixMask& m,
                                   const std::optional<std::pair<ColourParams, ColourParams>>& colour =
                                       std::nullopt,
                                   const std::optional<double>& confidence_threshold = std::nullopt) {
  detail::check_same_shape(x_a, x_b, "cons_loss_cutmix");
  auto pa = detail::frozen_probs(ts.teacher, x_a);
  auto pb = detail::frozen_probs(ts.teacher, x_b);
  auto target = mix(pa, pb, m);
  TensorT<T> sa = colour ? apply_colour(x_a, colour->first) : x_a;
  TensorT<T> sb = colour ? apply_colour(x_b, colour->second) : x_b;
  auto xm = mix(sa, sb, m);
  Mask valid(m.mask.h, m.mask.w, true);
  if (confidence_threshold) detail::apply_confidence(valid, target, *confidence_threshold);
  return cons_loss_pair(detail::student_probs(ts.student, xm), target, valid);
}

// The student predicts from an image with a rectangle erased; it must match
// the teacher's full-image prediction outside that rectangle.
template <class T>
inline TensorT<T> cons_loss_cutout(TeacherStudentT<T>& ts, const TensorT<T>& x, const MixMask& m,
                                   const std::array<T, 3>& fill,
                                   const std::optional<ColourParams>& colour = std::nullopt,
                                   const std::optional<double>& confidence_threshold = std::nullopt) {
  TensorT<T> student_in = colour ? apply_colour(x, *colour) : x;
  student_in = cutout_apply(student_in, m, fill);
  auto target = detail::frozen_probs(ts.teacher, x);
  Mask valid = m.mask.logical_not();
  if (confidence_threshold) detail::apply_confidence(valid, target, *confidence_threshold);
  return cons_loss_pair(detail::student_probs(ts.student, student_in), target, valid);
}

// Convex combination: prediction on the blend must match the blend of the
// teacher predictions.
template <class T>
inline TensorT<T> cons_loss_ict(TeacherStudentT<T>& ts, const TensorT<T>& x_a, const TensorT<T>& x_b,
                                double lambda,
                                const std::optional<std::pair<ColourParams, ColourParams>>& colour =
                                    std::nullopt,
                                const std::optional<double>& confidence_threshold = std::nullopt) {
  detail::check_same_shape(x_a, x_b, "cons_loss_ict");
  if (!(lambda >= 0 && lambda <= 1)) throw ConfigError("cons_loss_ict: lambda must lie in [0,1]");
  auto pa = detail::frozen_probs(ts.teacher, x_a);
  auto pb = detail::frozen_probs(ts.teacher, x_b);
  auto target = ict_mix(pa, pb, lambda);
  TensorT<T> sa = colour ? apply_colour(x_a, colour->first) : x_a;
  TensorT<T> sb = colour ? apply_colour(x_b, colour->second) : x_b;
  auto xm = ict_mix(sa, sb, lambda);
  Mask valid(x_a.dim(1), x_a.dim(2), true);
  if (confidence_threshold) detail::apply_confidence(valid, target, *confidence_threshold);
  return cons_loss_pair(detail::student_probs(ts.student, xm), target, valid);
}

// KL(p(x) || p(x + r_adv)) on the student itself, r_adv from power iteration.
template <class T>
inline TensorT<T> cons_loss_vat(TeacherStudentT<T>& ts, const TensorT<T>& x, const VatConfig& cfg, Rng& rng,
                                const std::optional<double>& confidence_threshold = std::nullopt) {
  auto r = vat_direction(ts.student, x, cfg, rng);
  const std::vector<int> b4 = {1, x.dim(0), x.dim(1), x.dim(2)};
  TensorT<T> p_ref;
  {
    NoGradGuard ng;
    p_ref = softmax_channels(ts.student.forward(reshape(x, b4)));
  }
  std::vector<T> xp(x.numel());
  const auto& xv = x.values();
  const auto& rv = r.values();
  for (size_t i = 0; i < xp.size(); ++i) xp[i] = xv[i] + rv[i];
  auto logits = ts.student.forward(reshape(TensorT<T>::from_data(x.shape(), std::move(xp)), b4));

  std::optional<Mask> conf;
  if (confidence_threshold) {
    Mask valid(x.dim(1), x.dim(2), true);
    auto p3 = reshape(p_ref, {p_ref.dim(1), p_ref.dim(2), p_ref.dim(3)});
    detail::apply_confidence(valid, p3, *confidence_threshold);
    conf = std::move(valid);
  }
  return kl_mean_from_logits(logits, p_ref, conf ? &conf->v : nullptr);
}

}  // namespace coseg

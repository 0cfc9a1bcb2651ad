#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "coseg/config.hpp"
#include "coseg/consistency.hpp"
#include "coseg/data.hpp"
#include "coseg/metrics.hpp"
#include "coseg/version.hpp"

namespace coseg {

// Semi-supervised training loop: supervised cross-entropy on the labelled
// stream plus the configured consistency term on the unlabelled stream,
// momentum SGD on the student, EMA onto the teacher after every step.
//
// Everything a run emits (metrics CSV, replay log, manifest, checkpoints)
// is a pure function of (config, dataset bytes, seed): same-seed runs
// produce byte-identical metrics files.

struct StepReport {
  int step = 0;
  double loss_sup = 0;
  double loss_cons = 0;  // unweighted
  double loss_total = 0;
  double gamma = 0;
  std::vector<int> labelled_ids, unlabelled_ids;
};

struct RunResult {
  std::string run_id, config_hash;
  uint64_t seed = 0;
  double final_miou = 0, best_miou = 0;
  int best_step = -1;
  std::vector<std::pair<int, double>> val_trace;  // (step, teacher mIoU)
};

inline std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- replay serialization ---------------------------------------------------

inline nlohmann::json to_json(const AffineParams& p) {
  return {{"rotation", p.rotation}, {"dx", p.dx}, {"dy", p.dy}, {"scale", p.scale}, {"hflip", p.hflip}};
}

inline AffineParams affine_from_json(const nlohmann::json& j) {
  AffineParams p;
  p.rotation = j.at("rotation").get<double>();
  p.dx = j.at("dx").get<double>();
  p.dy = j.at("dy").get<double>();
  p.scale = j.at("scale").get<double>();
  p.hflip = j.at("hflip").get<bool>();
  return p;
}

inline nlohmann::json to_json(const ColourParams& p) {
  return {{"brightness", p.brightness},
          {"contrast", p.contrast},
          {"saturation", p.saturation},
          {"hue", p.hue},
          {"order", std::vector<int>(p.op_order.begin(), p.op_order.end())}};
}

inline ColourParams colour_from_json(const nlohmann::json& j) {
  ColourParams p;
  p.brightness = j.at("brightness").get<double>();
  p.contrast = j.at("contrast").get<double>();
  p.saturation = j.at("saturation").get<double>();
  p.hue = j.at("hue").get<double>();
  const auto ord = j.at("order").get<std::vector<int>>();
  if (ord.size() != 4) throw DataError("replay: colour op order must have 4 entries");
  std::copy(ord.begin(), ord.end(), p.op_order.begin());
  return p;
}

inline nlohmann::json to_json(const MixMask& m) {
  return {{"x0", m.x0}, {"y0", m.y0}, {"w", m.bw}, {"h", m.bh}};
}

inline MixMask box_from_json(const nlohmann::json& j, int h, int w) {
  MixMask m;
  m.x0 = j.at("x0").get<int>();
  m.y0 = j.at("y0").get<int>();
  m.bw = j.at("w").get<int>();
  m.bh = j.at("h").get<int>();
  if (m.x0 < 0 || m.y0 < 0 || m.bw < 1 || m.bh < 1 || m.x0 + m.bw > w || m.y0 + m.bh > h)
    throw DataError("replay: box outside image");
  m.mask = Mask(h, w);
  for (int i = 0; i < m.bh; ++i)
    for (int j2 = 0; j2 < m.bw; ++j2) m.mask.set(m.y0 + i, m.x0 + j2, 1);
  return m;
}

// ---- optimizer ----------------------------------------------------------------

// v <- momentum*v + g;  p <- p - lr*v
template <class T>
class SgdMomentum {
 public:
  void step(const std::vector<TensorT<T>*>& params, double lr, double momentum) {
    if (velocity_.empty()) {
      velocity_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i]->numel(), T(0));
    }
    if (velocity_.size() != params.size()) throw ShapeError("optimizer: parameter count changed");
    const T m = static_cast<T>(momentum);
    const T step_size = static_cast<T>(lr);
    for (size_t i = 0; i < params.size(); ++i) {
      auto& v = velocity_[i];
      auto& p = params[i]->values();
      const auto& g = params[i]->grad();
      if (v.size() != p.size()) throw ShapeError("optimizer: parameter size changed");
      for (size_t k = 0; k < p.size(); ++k) {
        v[k] = m * v[k] + g[k];
        p[k] -= step_size * v[k];
      }
    }
  }

 private:
  std::vector<std::vector<T>> velocity_;
};

// Learning rate for 1-based step t of `total`. "cosine" anneals from lr
// towards zero; "constant" is the identity.
inline double scheduled_lr(double lr, const std::string& schedule, int step, int total) {
  if (schedule != "cosine" || total < 1) return lr;
  const double p = static_cast<double>(step - 1) / total;
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

// ---- evaluation ----------------------------------------------------------------

template <class T>
inline ClassMap predict_classmap(const SegNetworkT<T>& net, const TensorF& image) {
  NoGradGuard ng;
  auto x = to_precision<T>(image);
  auto logits = net.forward(reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)}));
  const int c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const size_t plane = static_cast<size_t>(h) * w;
  const auto& lv = logits.values();
  ClassMap pred(h, w);
  for (size_t p = 0; p < plane; ++p) {
    int best = 0;
    T best_v = lv[p];
    for (int ch = 1; ch < c; ++ch) {
      const T v = lv[ch * plane + p];
      if (v > best_v) {
        best_v = v;
        best = ch;
      }
    }
    pred.v[p] = static_cast<uint8_t>(best);
  }
  return pred;
}

// Deterministic, side-effect-free mIoU of a network over a dataset.
template <class T>
inline IouReport evaluate(const SegNetworkT<T>& net, const Dataset& ds) {
  if (ds.samples.empty()) throw DataError("evaluate: empty dataset");
  ConfusionMatrix cm(ds.classes);
  for (const auto& s : ds.samples) {
    if (s.class_map.v.empty()) throw DataError("evaluate: sample " + std::to_string(s.id) + " has no labels");
    cm.accumulate(predict_classmap(net, s.image), s.class_map);
  }
  return miou(cm);
}

// ---- trainer --------------------------------------------------------------------

template <class T>
class TrainerT {
 public:
  TrainerT(const ExperimentConfig& cfg, const Dataset& train, const Dataset& val)
      : cfg_(cfg),
        val_(val),
        ts_(TeacherStudentT<T>::create(cfg.arch, cfg.run.seed, cfg.ema_decay)),
        lab_rng_(cfg.run.seed, 0xA11),
        unl_rng_(cfg.run.seed, 0xB22) {
    if (train.classes != cfg.arch.num_classes || val.classes != cfg.arch.num_classes)
      throw ConfigError("trainer: dataset has " + std::to_string(train.classes) +
                        " classes, arch expects " + std::to_string(cfg.arch.num_classes));
    if (train.height % 8 != 0 || train.width % 8 != 0)
      throw ConfigError("trainer: dataset size must be divisible by 8");
    if (val.height != train.height || val.width != train.width)
      throw ConfigError("trainer: train/val image sizes differ");
    h_ = train.height;
    w_ = train.width;

    SplitSpec spec;
    spec.total = static_cast<int>(train.samples.size());
    spec.labelled_count = cfg.split_labelled < 0 ? spec.total : cfg.split_labelled;
    spec.seed = cfg.split_seed ? *cfg.split_seed : cfg.run.seed;
    std::tie(labelled_, unlabelled_) = split(train.samples, spec);
    if (labelled_.empty()) throw ConfigError("trainer: no labelled samples");

    const bool needs_pairs =
        cfg.consistency.mode == ConsMode::cutmix || cfg.consistency.mode == ConsMode::ict;
    if (cfg.consistency.gamma > 0) {
      if (unlabelled_.empty())
        throw ConfigError("trainer: gamma > 0 but the split leaves no unlabelled samples");
      if (needs_pairs && cfg.run.batch_unlabelled % 2 != 0)
        throw ConfigError("trainer: cutmix/ict need an even unlabelled batch size");
    }

    const auto fill = dataset_mean_colour(train);
    fill_ = {static_cast<T>(fill[0]), static_cast<T>(fill[1]), static_cast<T>(fill[2])};

    lab_order_.resize(labelled_.size());
    std::iota(lab_order_.begin(), lab_order_.end(), 0);
    unl_order_.resize(unlabelled_.size());
    std::iota(unl_order_.begin(), unl_order_.end(), 0);
    lab_rng_.shuffle(lab_order_.begin(), lab_order_.end());
    if (!unl_order_.empty()) unl_rng_.shuffle(unl_order_.begin(), unl_order_.end());
  }

  TeacherStudentT<T>& ts() { return ts_; }
  const std::vector<Sample>& labelled() const { return labelled_; }
  const std::vector<Sample>& unlabelled() const { return unlabelled_; }
  const std::array<T, 3>& cutout_fill() const { return fill_; }

  // Loads student and teacher parameters from a checkpoint; the checkpoint's
  // architecture must equal the configured one. Call before the first step.
  void warm_start(const std::string& path) {
    auto loaded = SegNetworkT<T>::load_checkpoint(path);
    if (loaded.arch().to_json() != cfg_.arch.to_json())
      throw ConfigError("trainer: checkpoint arch " + loaded.arch().to_json().dump() +
                        " differs from configured arch " + cfg_.arch.to_json().dump());
    ts_.student.copy_params_from(loaded);
    ts_.teacher.copy_params_from(loaded);
  }

  // One optimization step. replay, when given, receives one JSON line
  // describing every random draw the step consumed.
  StepReport train_step(int step, nlohmann::json* replay = nullptr) {
    StepReport rep;
    rep.step = step;
    rep.gamma = cfg_.consistency.gamma;
    Rng aug_rng(cfg_.run.seed, 0xC000000ULL + static_cast<uint64_t>(step));
    nlohmann::json replay_sup = nlohmann::json::array();
    nlohmann::json replay_cons = nlohmann::json::array();

    // supervised branch: shared-parameter transform of image and labels
    const int bl = cfg_.run.batch_labelled;
    std::vector<T> batch(static_cast<size_t>(bl) * 3 * h_ * w_);
    std::vector<uint8_t> labels(static_cast<size_t>(bl) * h_ * w_);
    const size_t img_sz = static_cast<size_t>(3) * h_ * w_;
    const size_t map_sz = static_cast<size_t>(h_) * w_;
    for (int b = 0; b < bl; ++b) {
      const Sample& s = labelled_[next_labelled()];
      rep.labelled_ids.push_back(s.id);
      auto img = to_precision<T>(s.image);
      if (cfg_.augment.sup_affine) {
        const AffineParams p = sample_affine(aug_rng, cfg_.augment.affine);
        auto [timg, valid] = apply_affine(img, p);
        const ClassMap tgt = apply_affine_classmap(s.class_map, p, 255);
        std::copy(timg.values().begin(), timg.values().end(), batch.begin() + b * img_sz);
        std::copy(tgt.v.begin(), tgt.v.end(), labels.begin() + b * map_sz);
        replay_sup.push_back({{"id", s.id}, {"affine", to_json(p)}});
      } else {
        std::copy(img.values().begin(), img.values().end(), batch.begin() + b * img_sz);
        std::copy(s.class_map.v.begin(), s.class_map.v.end(), labels.begin() + b * map_sz);
        replay_sup.push_back({{"id", s.id}});
      }
    }
    auto logits = ts_.student.forward(
        TensorT<T>::from_data({bl, 3, h_, w_}, std::move(batch)));
    auto loss_sup = cross_entropy_seg(logits, labels, 255);

    // consistency branch
    TensorT<T> loss_cons = TensorT<T>::scalar_tensor(T(0));
    if (cfg_.consistency.gamma > 0) {
      Rng vat_rng(cfg_.run.seed, 0xD000000ULL + static_cast<uint64_t>(step));
      std::vector<TensorT<T>> terms;
      const int bu = cfg_.run.batch_unlabelled;
      const auto& thr = cfg_.consistency.confidence_threshold;
      const bool colour_on = cfg_.augment.colour_enabled;
      switch (cfg_.consistency.mode) {
        case ConsMode::std_aug:
          for (int b = 0; b < bu; ++b) {
            const Sample& s = unlabelled_[next_unlabelled()];
            rep.unlabelled_ids.push_back(s.id);
            const AffineParams p = sample_affine(aug_rng, cfg_.augment.affine);
            std::optional<ColourParams> col;
            nlohmann::json r = {{"id", s.id}, {"affine", to_json(p)}};
            if (colour_on) {
              col = sample_colour(aug_rng, cfg_.augment.colour);
              r["colour"] = to_json(*col);
            }
            terms.push_back(cons_loss_stdaug(ts_, to_precision<T>(s.image), p, col, thr));
            replay_cons.push_back(std::move(r));
          }
          break;
        case ConsMode::cutout:
          for (int b = 0; b < bu; ++b) {
            const Sample& s = unlabelled_[next_unlabelled()];
            rep.unlabelled_ids.push_back(s.id);
            const MixMask m = sample_box_mask(aug_rng, h_, w_, cfg_.augment.cut_ratio);
            std::optional<ColourParams> col;
            nlohmann::json r = {{"id", s.id}, {"box", to_json(m)}};
            if (colour_on) {
              col = sample_colour(aug_rng, cfg_.augment.colour);
              r["colour"] = to_json(*col);
            }
            terms.push_back(cons_loss_cutout(ts_, to_precision<T>(s.image), m, fill_, col, thr));
            replay_cons.push_back(std::move(r));
          }
          break;
        case ConsMode::cutmix:
          for (int b = 0; b < bu; b += 2) {
            const Sample& sa = unlabelled_[next_unlabelled()];
            const Sample& sb = unlabelled_[next_unlabelled()];
            rep.unlabelled_ids.push_back(sa.id);
            rep.unlabelled_ids.push_back(sb.id);
            const MixMask m = sample_box_mask(aug_rng, h_, w_, cfg_.augment.cut_ratio);
            std::optional<std::pair<ColourParams, ColourParams>> col;
            nlohmann::json r = {{"id_a", sa.id}, {"id_b", sb.id}, {"box", to_json(m)}};
            if (colour_on) {
              auto ca = sample_colour(aug_rng, cfg_.augment.colour);
              auto cb = sample_colour(aug_rng, cfg_.augment.colour);
              r["colour_a"] = to_json(ca);
              r["colour_b"] = to_json(cb);
              col = std::make_pair(ca, cb);
            }
            terms.push_back(
                cons_loss_cutmix(ts_, to_precision<T>(sa.image), to_precision<T>(sb.image), m, col, thr));
            replay_cons.push_back(std::move(r));
          }
          break;
        case ConsMode::ict:
          for (int b = 0; b < bu; b += 2) {
            const Sample& sa = unlabelled_[next_unlabelled()];
            const Sample& sb = unlabelled_[next_unlabelled()];
            rep.unlabelled_ids.push_back(sa.id);
            rep.unlabelled_ids.push_back(sb.id);
            const double lambda = aug_rng.uniform01();
            std::optional<std::pair<ColourParams, ColourParams>> col;
            nlohmann::json r = {{"id_a", sa.id}, {"id_b", sb.id}, {"lambda", lambda}};
            if (colour_on) {
              auto ca = sample_colour(aug_rng, cfg_.augment.colour);
              auto cb = sample_colour(aug_rng, cfg_.augment.colour);
              r["colour_a"] = to_json(ca);
              r["colour_b"] = to_json(cb);
              col = std::make_pair(ca, cb);
            }
            terms.push_back(cons_loss_ict(ts_, to_precision<T>(sa.image), to_precision<T>(sb.image),
                                          lambda, col, thr));
            replay_cons.push_back(std::move(r));
          }
          break;
        case ConsMode::vat:
          for (int b = 0; b < bu; ++b) {
            const Sample& s = unlabelled_[next_unlabelled()];
            rep.unlabelled_ids.push_back(s.id);
            const uint64_t substream = vat_rng.next_u64();
            nlohmann::json r = {{"id", s.id}, {"vat_substream", substream}};
            auto x = to_precision<T>(s.image);
            if (colour_on) {
              const ColourParams col = sample_colour(aug_rng, cfg_.augment.colour);
              r["colour"] = to_json(col);
              x = apply_colour(x, col);
            }
            Rng sub(substream);
            terms.push_back(cons_loss_vat(ts_, x, cfg_.consistency.vat, sub, thr));
            replay_cons.push_back(std::move(r));
          }
          break;
      }
      loss_cons = terms[0];
      for (size_t i = 1; i < terms.size(); ++i) loss_cons = add(loss_cons, terms[i]);
      loss_cons = mul_scalar(loss_cons, T(1) / static_cast<T>(terms.size()));
    }

    auto total = total_loss(loss_sup, loss_cons, cfg_.consistency.gamma);
    rep.loss_sup = static_cast<double>(loss_sup.scalar());
    rep.loss_cons = static_cast<double>(loss_cons.scalar());
    rep.loss_total = static_cast<double>(total.scalar());
    if (!std::isfinite(rep.loss_total)) {
      std::string ids = "labelled [";
      for (size_t i = 0; i < rep.labelled_ids.size(); ++i)
        ids += (i ? "," : "") + std::to_string(rep.labelled_ids[i]);
      ids += "], unlabelled [";
      for (size_t i = 0; i < rep.unlabelled_ids.size(); ++i)
        ids += (i ? "," : "") + std::to_string(rep.unlabelled_ids[i]);
      ids += "]";
      throw NumericError("train_step " + std::to_string(step) + ": non-finite loss (sup=" +
                         format_value(rep.loss_sup) + ", cons=" + format_value(rep.loss_cons) +
                         "); batch ids: " + ids);
    }

    ts_.student.zero_grad();
    backward(total);
    opt_.step(ts_.student.params(),
              scheduled_lr(cfg_.run.lr, cfg_.run.lr_schedule, step, cfg_.run.steps),
              cfg_.run.momentum);
    ema_update(ts_);

    if (replay) {
      *replay = {{"step", step},
                 {"gamma", cfg_.consistency.gamma},
                 {"mode", to_string(cfg_.consistency.mode)},
                 {"sup", std::move(replay_sup)},
                 {"cons", std::move(replay_cons)}};
    }
    return rep;
  }

  // Full run: metrics CSV, replay log, manifest, checkpoints under out_dir.
  RunResult run(const std::string& out_dir, const nlohmann::json& extra_manifest = nlohmann::json::object()) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    fs::create_directories(out_dir + "/checkpoints");

    RunResult res;
    res.run_id = cfg_.run_id;
    res.config_hash = cfg_.config_hash;
    res.seed = cfg_.run.seed;

    nlohmann::json manifest = {{"run_id", cfg_.run_id},
                               {"config_hash", cfg_.config_hash},
                               {"seed", cfg_.run.seed},
                               {"version", kVersionString},
                               {"config", cfg_.resolved},
                               {"status", "running"}};
    for (auto it = extra_manifest.begin(); it != extra_manifest.end(); ++it)
      manifest[it.key()] = it.value();
    write_manifest(out_dir, manifest);

    std::ofstream metrics(out_dir + "/metrics.csv", std::ios::binary);
    if (!metrics) throw DataError("trainer: cannot write " + out_dir + "/metrics.csv");
    metrics << "# coseg-metrics-v1\n"
            << "run_id,step,split,metric,value\n";
    std::ofstream replay(out_dir + "/replay.jsonl", std::ios::binary);
    if (!replay) throw DataError("trainer: cannot write " + out_dir + "/replay.jsonl");

    auto emit = [&](int step, const char* split, const std::string& metric, double value) {
      metrics << cfg_.run_id << ',' << step << ',' << split << ',' << metric << ','
              << format_value(value) << '\n';
    };
    auto run_eval = [&](int step) {
      const IouReport r = evaluate(ts_.teacher, val_);
      emit(step, "val", "miou", r.miou);
      for (int c = 0; c < static_cast<int>(r.per_class.size()); ++c)
        emit(step, "val", "iou_class_" + std::to_string(c), r.per_class[static_cast<size_t>(c)]);
      res.val_trace.emplace_back(step, r.miou);
      if (res.best_step < 0 || r.miou > res.best_miou) {
        res.best_miou = r.miou;
        res.best_step = step;
        ts_.teacher.save_checkpoint(out_dir + "/checkpoints/best_teacher");
      }
      return r.miou;
    };

    double last_miou = 0;
    for (int step = 1; step <= cfg_.run.steps; ++step) {
      nlohmann::json rj;
      const StepReport rep = train_step(step, &rj);
      replay << rj.dump() << '\n';
      emit(step, "train", "loss_sup", rep.loss_sup);
      emit(step, "train", "loss_cons", rep.loss_cons);
      emit(step, "train", "loss_cons_weighted", rep.gamma * rep.loss_cons);
      emit(step, "train", "loss_total", rep.loss_total);
      if (step % cfg_.run.eval_interval == 0 || step == cfg_.run.steps) last_miou = run_eval(step);
      if (cfg_.run.checkpoint_interval > 0 && step % cfg_.run.checkpoint_interval == 0) {
        ts_.student.save_checkpoint(out_dir + "/checkpoints/last_student");
        ts_.teacher.save_checkpoint(out_dir + "/checkpoints/last_teacher");
      }
    }
    res.final_miou = last_miou;

    ts_.student.save_checkpoint(out_dir + "/checkpoints/student");
    ts_.teacher.save_checkpoint(out_dir + "/checkpoints/teacher");

    manifest["status"] = "complete";
    manifest["result"] = {{"final_miou", res.final_miou},
                          {"best_miou", res.best_miou},
                          {"best_step", res.best_step},
                          {"steps", cfg_.run.steps}};
    write_manifest(out_dir, manifest);
    return res;
  }

 private:
  size_t next_labelled() {
    if (lab_pos_ >= lab_order_.size()) {
      lab_rng_.shuffle(lab_order_.begin(), lab_order_.end());
      lab_pos_ = 0;
    }
    return lab_order_[lab_pos_++];
  }

  size_t next_unlabelled() {
    if (unl_pos_ >= unl_order_.size()) {
      unl_rng_.shuffle(unl_order_.begin(), unl_order_.end());
      unl_pos_ = 0;
    }
    return unl_order_[unl_pos_++];
  }

  static void write_manifest(const std::string& out_dir, const nlohmann::json& manifest) {
    std::ofstream os(out_dir + "/manifest.json", std::ios::binary);
    if (!os) throw DataError("trainer: cannot write " + out_dir + "/manifest.json");
    os << manifest.dump(2) << "\n";
  }

  ExperimentConfig cfg_;
  Dataset val_;
  TeacherStudentT<T> ts_;
  SgdMomentum<T> opt_;
  std::vector<Sample> labelled_, unlabelled_;
  std::vector<size_t> lab_order_, unl_order_;
  size_t lab_pos_ = 0, unl_pos_ = 0;
  Rng lab_rng_, unl_rng_;
  std::array<T, 3> fill_ = {T(0), T(0), T(0)};
  int h_ = 0, w_ = 0;
};

using Trainer = TrainerT<double>;
using TrainerF = TrainerT<float>;

// Dispatches on cfg.run.precision ("f32" or "f64"). A non-empty init_from
// warm-starts both networks from that checkpoint.
inline RunResult run_experiment(const ExperimentConfig& cfg, const Dataset& train, const Dataset& val,
                                const std::string& out_dir,
                                const nlohmann::json& extra_manifest = nlohmann::json::object(),
                                const std::string& init_from = "") {
  if (cfg.run.precision == "f64") {
    TrainerT<double> tr(cfg, train, val);
    if (!init_from.empty()) tr.warm_start(init_from);
    return tr.run(out_dir, extra_manifest);
  }
  TrainerT<float> tr(cfg, train, val);
  if (!init_from.empty()) tr.warm_start(init_from);
  return tr.run(out_dir, extra_manifest);
}

}  // namespace coseg

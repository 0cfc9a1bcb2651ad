// coseg: dataset generation, training, evaluation, and report emission.
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric abort.

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "coseg/config.hpp"
#include "coseg/data.hpp"
#include "coseg/report.hpp"
#include "coseg/trainer.hpp"
#include "coseg/version.hpp"

namespace {

using nlohmann::json;

std::string out_root() {
  const char* env = std::getenv("COSEG_OUT_ROOT");
  return env && *env ? env : "runs";
}

template <class T>
void put(json& block, const char* key, const std::optional<T>& v) {
  if (v) block[key] = *v;
}

struct GenFlags {
  std::string out;
  std::string config;
  std::optional<int> height, width, count, shapes_min, shapes_max;
  std::optional<double> kappa, noise_sigma, radius_min, radius_max;
  std::optional<uint64_t> seed;
};

struct TrainFlags {
  std::string config;
  std::string data, val;
  std::string out;
  std::string init_from;
  int seeds = 1;
  std::optional<uint64_t> seed, split_seed;
  std::optional<int> steps, batch_labelled, batch_unlabelled, eval_interval, checkpoint_interval;
  std::optional<int> labelled;
  std::optional<double> lr, momentum, gamma, ema_decay, confidence_threshold;
  std::optional<std::string> mode, distance, precision, colour_aug, lr_schedule;
};

struct EvalFlags {
  std::string checkpoint;
  std::string data;
  std::string csv;
};

struct ReportFlags {
  std::vector<std::string> dirs;
  std::string out;
};

json overrides_for(const GenFlags& f) {
  json data = json::object();
  put(data, "height", f.height);
  put(data, "width", f.width);
  put(data, "count", f.count);
  put(data, "kappa", f.kappa);
  put(data, "noise_sigma", f.noise_sigma);
  put(data, "shapes_min", f.shapes_min);
  put(data, "shapes_max", f.shapes_max);
  put(data, "radius_min", f.radius_min);
  put(data, "radius_max", f.radius_max);
  put(data, "seed", f.seed);
  return json{{"data", data}};
}

json overrides_for(const TrainFlags& f) {
  json run = json::object(), cons = json::object(), aug = json::object(), split = json::object();
  put(run, "seed", f.seed);
  put(run, "steps", f.steps);
  put(run, "lr", f.lr);
  put(run, "lr_schedule", f.lr_schedule);
  put(run, "momentum", f.momentum);
  put(run, "batch_labelled", f.batch_labelled);
  put(run, "batch_unlabelled", f.batch_unlabelled);
  put(run, "eval_interval", f.eval_interval);
  put(run, "checkpoint_interval", f.checkpoint_interval);
  put(run, "precision", f.precision);
  put(cons, "mode", f.mode);
  put(cons, "gamma", f.gamma);
  put(cons, "distance", f.distance);
  put(cons, "ema_decay", f.ema_decay);
  put(cons, "confidence_threshold", f.confidence_threshold);
  if (f.colour_aug) aug["colour_enabled"] = *f.colour_aug == "on";
  put(split, "labelled", f.labelled);
  put(split, "seed", f.split_seed);
  json j = json::object();
  if (!run.empty()) j["run"] = run;
  if (!cons.empty()) j["consistency"] = cons;
  if (!aug.empty()) j["augment"] = aug;
  if (!split.empty()) j["split"] = split;
  return j;
}

json load_base_config(const std::string& path) {
  return path.empty() ? json::object() : coseg::load_json_file(path);
}

int cmd_gen(const GenFlags& f) {
  json doc = load_base_config(f.config);
  coseg::merge_config(doc, overrides_for(f));
  const coseg::ExperimentConfig cfg = coseg::parse_experiment_config(doc);
  const coseg::Dataset ds = coseg::gen_shapes_dataset(cfg.data, cfg.data_seed);
  coseg::save_dataset(f.out, ds);
  std::cout << "wrote " << f.out << ": " << ds.samples.size() << " samples, " << ds.height << "x"
            << ds.width << ", " << ds.classes << " classes, kappa=" << cfg.data.kappa << ", seed="
            << cfg.data_seed << "\n";
  return 0;
}

int cmd_train(const TrainFlags& f) {
  if (f.seeds < 1) throw coseg::ConfigError("--seeds must be >= 1");
  json doc = load_base_config(f.config);
  coseg::merge_config(doc, overrides_for(f));

  const coseg::Dataset train = coseg::load_dataset(f.data);
  const coseg::Dataset val = coseg::load_dataset(f.val);
  json datasets{{"train", f.data}, {"val", f.val}};
  if (!f.init_from.empty()) datasets["init_from"] = f.init_from;
  const json extra{{"datasets", datasets}};

  if (f.seeds == 1) {
    const coseg::ExperimentConfig cfg = coseg::parse_experiment_config(doc);
    const std::string dir = f.out.empty() ? out_root() + "/" + cfg.run_id : f.out;
    const coseg::RunResult res = coseg::run_experiment(cfg, train, val, dir, extra, f.init_from);
    std::cout << "run " << res.run_id << ": final mIoU " << res.final_miou << ", best "
              << res.best_miou << " @ step " << res.best_step << " -> " << dir << "\n";
    return 0;
  }

  const uint64_t base = f.seed.value_or(coseg::parse_experiment_config(doc).run.seed);
  std::string root = f.out;
  std::vector<std::string> dirs;
  for (int i = 0; i < f.seeds; ++i) {
    json run_doc = doc;
    coseg::merge_config(run_doc, json{{"run", {{"seed", base + static_cast<uint64_t>(i)}}}});
    const coseg::ExperimentConfig cfg = coseg::parse_experiment_config(run_doc);
    if (root.empty()) root = out_root() + "/" + cfg.config_hash.substr(0, 12) + "-sweep";
    const std::string dir = root + "/s" + std::to_string(cfg.run.seed);
    const coseg::RunResult res = coseg::run_experiment(cfg, train, val, dir, extra, f.init_from);
    std::cout << "run " << res.run_id << ": final mIoU " << res.final_miou << ", best "
              << res.best_miou << " @ step " << res.best_step << "\n";
    dirs.push_back(dir);
  }
  const coseg::Report rep = coseg::build_report(dirs);
  std::cout << coseg::report_text(rep);
  coseg::write_report_files(rep, root);
  std::cout << "sweep artifacts -> " << root << "\n";
  return 0;
}

int cmd_eval(const EvalFlags& f) {
  const auto net = coseg::SegNetworkT<float>::load_checkpoint(f.checkpoint);
  const coseg::Dataset ds = coseg::load_dataset(f.data);
  const coseg::IouReport r = coseg::evaluate(net, ds);
  std::ostringstream csv;
  csv << "# coseg-eval-v1\nclass,present,iou\n";
  for (size_t c = 0; c < r.per_class.size(); ++c) {
    std::cout << "class " << c << ": "
              << (r.present[c] ? "iou=" + std::to_string(r.per_class[c]) : std::string("absent"))
              << "\n";
    char line[96];
    std::snprintf(line, sizeof line, "%zu,%d,%.17g\n", c, r.present[c] ? 1 : 0,
                  r.present[c] ? r.per_class[c] : std::nan(""));
    csv << line;
  }
  std::cout << "mIoU: " << r.miou << "\n";
  char line[64];
  std::snprintf(line, sizeof line, "miou,1,%.17g\n", r.miou);
  csv << line;
  if (!f.csv.empty()) {
    std::ofstream os(f.csv, std::ios::binary);
    if (!os) throw coseg::DataError("eval: cannot write " + f.csv);
    os << csv.str();
  }
  return 0;
}

int cmd_report(const ReportFlags& f) {
  const coseg::Report rep = coseg::build_report(f.dirs);
  std::cout << coseg::report_text(rep);
  const std::string dir = f.out.empty() ? out_root() + "/report" : f.out;
  coseg::write_report_files(rep, dir);
  std::cout << "report files -> " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic-shapes semi-supervised segmentation workbench"};
  app.set_version_flag("--version,-V", std::string(coseg::kVersionString));
  app.require_subcommand(1);

  GenFlags gf;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic shapes dataset");
  gen->add_option("--out", gf.out, "output dataset path (.csds)")->required();
  gen->add_option("--config", gf.config, "experiment config JSON (its 'data' block is used)");
  gen->add_option("--height", gf.height, "image height");
  gen->add_option("--width", gf.width, "image width");
  gen->add_option("--count", gf.count, "number of samples");
  gen->add_option("--kappa", gf.kappa, "colour overlap in [0,1]; 1 = colour carries no class info");
  gen->add_option("--noise-sigma", gf.noise_sigma, "gaussian pixel noise");
  gen->add_option("--shapes-min", gf.shapes_min, "min figures per image");
  gen->add_option("--shapes-max", gf.shapes_max, "max figures per image");
  gen->add_option("--radius-min", gf.radius_min, "min figure radius (px)");
  gen->add_option("--radius-max", gf.radius_max, "max figure radius (px)");
  gen->add_option("--seed", gf.seed, "generation seed");

  TrainFlags tf;
  CLI::App* train = app.add_subcommand("train", "train one run or a multi-seed sweep");
  train->add_option("--config", tf.config, "experiment config JSON; flags override it");
  train->add_option("--data", tf.data, "training dataset (.csds)")->required();
  train->add_option("--val", tf.val, "validation dataset (.csds)")->required();
  train->add_option("--out", tf.out, "run directory (default: $COSEG_OUT_ROOT/<run_id>)");
  train->add_option("--init-from", tf.init_from, "warm-start checkpoint (same architecture)");
  train->add_option("--seeds", tf.seeds, "run this many seeds (base seed, base+1, ...) and aggregate");
  train->add_option("--seed", tf.seed, "base run seed");
  train->add_option("--steps", tf.steps, "optimizer steps");
  train->add_option("--lr", tf.lr, "learning rate");
  train->add_option("--lr-schedule", tf.lr_schedule, "learning rate schedule")
      ->check(CLI::IsMember({"constant", "cosine"}));
  train->add_option("--momentum", tf.momentum, "sgd momentum");
  train->add_option("--batch-labelled", tf.batch_labelled, "labelled batch size");
  train->add_option("--batch-unlabelled", tf.batch_unlabelled, "unlabelled batch size");
  train->add_option("--eval-interval", tf.eval_interval, "steps between validation passes");
  train->add_option("--checkpoint-interval", tf.checkpoint_interval, "steps between checkpoints (0: end only)");
  train->add_option("--precision", tf.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  train->add_option("--mode", tf.mode, "consistency mode")
      ->check(CLI::IsMember({"std_aug", "cutout", "cutmix", "ict", "vat"}));
  train->add_option("--gamma", tf.gamma, "consistency weight (0: supervised baseline)");
  train->add_option("--distance", tf.distance, "consistency distance")
      ->check(CLI::IsMember({"mean_squared", "kl"}));
  train->add_option("--ema-decay", tf.ema_decay, "teacher EMA decay in [0,1)");
  train->add_option("--confidence-threshold", tf.confidence_threshold,
                    "zero the consistency loss where teacher confidence is below this");
  train->add_option("--colour-aug", tf.colour_aug, "colour jitter on the consistency branch")
      ->check(CLI::IsMember({"on", "off"}));
  train->add_option("--labelled", tf.labelled, "labelled sample count (-1: all labelled)");
  train->add_option("--split-seed", tf.split_seed, "labelled/unlabelled split seed (default: run seed)");

  EvalFlags ef;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a labelled dataset");
  eval->add_option("--checkpoint", ef.checkpoint, "checkpoint path (expects <path>.json beside it)")
      ->required();
  eval->add_option("--data", ef.data, "dataset (.csds)")->required();
  eval->add_option("--csv", ef.csv, "also write per-class IoU as CSV");

  ReportFlags rf;
  CLI::App* report = app.add_subcommand("report", "aggregate run directories into tables and plots");
  report->add_option("dirs", rf.dirs, "run directories")->required()->expected(-1);
  report->add_option("--out", rf.out, "report directory (default: $COSEG_OUT_ROOT/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen(gf);
    if (*train) return cmd_train(tf);
    if (*eval) return cmd_eval(ef);
    if (*report) return cmd_report(rf);
  } catch (const coseg::ConfigError& e) {
    std::cerr << "error (config): " << e.what() << "\n";
    return 2;
  } catch (const coseg::NumericError& e) {
    std::cerr << "error (numeric): " << e.what() << "\n";
    return 4;
  } catch (const coseg::DataError& e) {
    std::cerr << "error (data): " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#include "coseg/config.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>

namespace coseg {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: '" + path + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("config: unknown key '" + path + (path.empty() ? "" : ".") + it.key() + "'");
  }
}

bool has(const json& j, const char* key) { return j.contains(key) && !j.at(key).is_null(); }

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& path) {
  if (!has(j, key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: '" + path + "." + key + "' has the wrong type");
  }
}

}  // namespace

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open: " + path);
  try {
    json j;
    is >> j;
    return j;
  } catch (const json::exception& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
}

void merge_config(nlohmann::json& base, const nlohmann::json& overrides) {
  if (!overrides.is_object() || !base.is_object()) {
    base = overrides;
    return;
  }
  for (auto it = overrides.begin(); it != overrides.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base.at(it.key()).is_object())
      merge_config(base.at(it.key()), it.value());
    else
      base[it.key()] = it.value();
  }
}

std::string hash_json(const nlohmann::json& j) {
  const std::string s = j.dump();  // object keys are sorted, so this is canonical
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return std::string(buf);
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  check_keys(j, "", {"run", "consistency", "augment", "arch", "data", "split"});
  ExperimentConfig cfg;

  const json run = j.contains("run") ? j.at("run") : json::object();
  check_keys(run, "run",
             {"steps", "batch_labelled", "batch_unlabelled", "lr", "lr_schedule", "momentum",
              "optimizer", "seed", "eval_interval", "checkpoint_interval", "precision"});
  cfg.run.steps = get_or(run, "steps", cfg.run.steps, "run");
  cfg.run.batch_labelled = get_or(run, "batch_labelled", cfg.run.batch_labelled, "run");
  cfg.run.batch_unlabelled = get_or(run, "batch_unlabelled", cfg.run.batch_unlabelled, "run");
  cfg.run.lr = get_or(run, "lr", cfg.run.lr, "run");
  cfg.run.lr_schedule = get_or(run, "lr_schedule", cfg.run.lr_schedule, "run");
  cfg.run.momentum = get_or(run, "momentum", cfg.run.momentum, "run");
  cfg.run.optimizer = get_or(run, "optimizer", cfg.run.optimizer, "run");
  cfg.run.seed = get_or(run, "seed", cfg.run.seed, "run");
  cfg.run.eval_interval = get_or(run, "eval_interval", cfg.run.eval_interval, "run");
  cfg.run.checkpoint_interval = get_or(run, "checkpoint_interval", cfg.run.checkpoint_interval, "run");
  cfg.run.precision = get_or(run, "precision", cfg.run.precision, "run");
  if (cfg.run.steps < 1 || cfg.run.batch_labelled < 1 || cfg.run.batch_unlabelled < 1)
    throw ConfigError("config: run counts must be positive");
  if (!(cfg.run.lr > 0)) throw ConfigError("config: run.lr must be > 0");
  if (cfg.run.lr_schedule != "constant" && cfg.run.lr_schedule != "cosine")
    throw ConfigError("config: run.lr_schedule must be 'constant' or 'cosine'");
  if (cfg.run.momentum < 0 || cfg.run.momentum >= 1)
    throw ConfigError("config: run.momentum must lie in [0,1)");
  if (cfg.run.optimizer != "sgd_momentum")
    throw ConfigError("config: run.optimizer must be 'sgd_momentum'");
  if (cfg.run.eval_interval < 1) throw ConfigError("config: run.eval_interval must be >= 1");
  if (cfg.run.checkpoint_interval < 0) throw ConfigError("config: run.checkpoint_interval must be >= 0");
  if (cfg.run.precision != "f32" && cfg.run.precision != "f64")
    throw ConfigError("config: run.precision must be 'f32' or 'f64'");

  const json aug = j.contains("augment") ? j.at("augment") : json::object();
  check_keys(aug, "augment",
             {"colour_enabled", "brightness", "contrast", "saturation", "hue", "rotation", "translate",
              "scale_min", "scale_max", "hflip", "cut_ratio", "sup_affine"});
  cfg.augment.colour_enabled = get_or(aug, "colour_enabled", cfg.augment.colour_enabled, "augment");
  cfg.augment.colour.brightness = get_or(aug, "brightness", cfg.augment.colour.brightness, "augment");
  cfg.augment.colour.contrast = get_or(aug, "contrast", cfg.augment.colour.contrast, "augment");
  cfg.augment.colour.saturation = get_or(aug, "saturation", cfg.augment.colour.saturation, "augment");
  cfg.augment.colour.hue = get_or(aug, "hue", cfg.augment.colour.hue, "augment");
  cfg.augment.affine.rotation = get_or(aug, "rotation", cfg.augment.affine.rotation, "augment");
  cfg.augment.affine.translate = get_or(aug, "translate", cfg.augment.affine.translate, "augment");
  cfg.augment.affine.scale_min = get_or(aug, "scale_min", cfg.augment.affine.scale_min, "augment");
  cfg.augment.affine.scale_max = get_or(aug, "scale_max", cfg.augment.affine.scale_max, "augment");
  cfg.augment.affine.hflip = get_or(aug, "hflip", cfg.augment.affine.hflip, "augment");
  cfg.augment.cut_ratio = get_or(aug, "cut_ratio", cfg.augment.cut_ratio, "augment");
  cfg.augment.sup_affine = get_or(aug, "sup_affine", cfg.augment.sup_affine, "augment");
  validate(cfg.augment.colour);
  validate(cfg.augment.affine);
  if (!(cfg.augment.cut_ratio > 0) || !(cfg.augment.cut_ratio < 1))
    throw ConfigError("config: augment.cut_ratio must lie in (0,1)");

  const json cons = j.contains("consistency") ? j.at("consistency") : json::object();
  check_keys(cons, "consistency",
             {"mode", "gamma", "distance", "ema_decay", "confidence_threshold", "vat_xi_scale",
              "vat_n_power", "vat_epsilon"});
  cfg.consistency.mode = parse_cons_mode(get_or<std::string>(cons, "mode", "std_aug", "consistency"));
  cfg.consistency.gamma = has(cons, "gamma")
                              ? get_or(cons, "gamma", 0.0, "consistency")
                              : default_gamma(cfg.consistency.mode, cfg.augment.colour_enabled);
  cfg.consistency.distance =
      has(cons, "distance")
          ? parse_cons_distance(get_or<std::string>(cons, "distance", "", "consistency"))
          : default_distance(cfg.consistency.mode);
  cfg.ema_decay = get_or(cons, "ema_decay", cfg.ema_decay, "consistency");
  if (cfg.ema_decay < 0 || cfg.ema_decay >= 1)
    throw ConfigError("config: consistency.ema_decay must lie in [0,1)");
  if (has(cons, "confidence_threshold"))
    cfg.consistency.confidence_threshold = get_or(cons, "confidence_threshold", 0.0, "consistency");
  cfg.consistency.vat.xi_scale = get_or(cons, "vat_xi_scale", cfg.consistency.vat.xi_scale, "consistency");
  cfg.consistency.vat.n_power = get_or(cons, "vat_n_power", cfg.consistency.vat.n_power, "consistency");
  cfg.consistency.vat.epsilon = get_or(cons, "vat_epsilon", cfg.consistency.vat.epsilon, "consistency");
  if (cfg.consistency.vat.xi_scale <= 0 || cfg.consistency.vat.n_power < 0 ||
      cfg.consistency.vat.epsilon < 0)
    throw ConfigError("config: consistency.vat_* values out of range");
  validate(cfg.consistency);

  const json arch = j.contains("arch") ? j.at("arch") : json::object();
  check_keys(arch, "arch", {"in_channels", "num_classes", "widths"});
  cfg.arch.in_channels = get_or(arch, "in_channels", cfg.arch.in_channels, "arch");
  cfg.arch.num_classes = get_or(arch, "num_classes", cfg.arch.num_classes, "arch");
  cfg.arch.widths = get_or(arch, "widths", cfg.arch.widths, "arch");
  if (cfg.arch.in_channels != 3) throw ConfigError("config: arch.in_channels must be 3 (RGB)");
  if (cfg.arch.num_classes < 2) throw ConfigError("config: arch.num_classes must be >= 2");
  if (cfg.arch.widths.size() != 4) throw ConfigError("config: arch.widths must list 4 stage widths");
  for (int w : cfg.arch.widths)
    if (w < 1) throw ConfigError("config: arch.widths entries must be positive");

  const json data = j.contains("data") ? j.at("data") : json::object();
  check_keys(data, "data",
             {"height", "width", "count", "kappa", "noise_sigma", "shapes_min", "shapes_max",
              "radius_min", "radius_max", "seed"});
  cfg.data.height = get_or(data, "height", cfg.data.height, "data");
  cfg.data.width = get_or(data, "width", cfg.data.width, "data");
  cfg.data.count = get_or(data, "count", cfg.data.count, "data");
  cfg.data.kappa = get_or(data, "kappa", cfg.data.kappa, "data");
  cfg.data.noise_sigma = get_or(data, "noise_sigma", cfg.data.noise_sigma, "data");
  cfg.data.shapes_min = get_or(data, "shapes_min", cfg.data.shapes_min, "data");
  cfg.data.shapes_max = get_or(data, "shapes_max", cfg.data.shapes_max, "data");
  cfg.data.radius_min = get_or(data, "radius_min", cfg.data.radius_min, "data");
  cfg.data.radius_max = get_or(data, "radius_max", cfg.data.radius_max, "data");
  cfg.data_seed = get_or(data, "seed", cfg.data_seed, "data");
  validate(cfg.data);

  const json split = j.contains("split") ? j.at("split") : json::object();
  check_keys(split, "split", {"labelled", "seed"});
  cfg.split_labelled = get_or(split, "labelled", cfg.split_labelled, "split");
  if (has(split, "seed")) cfg.split_seed = get_or<uint64_t>(split, "seed", 0, "split");
  if (cfg.split_labelled < -1) throw ConfigError("config: split.labelled must be >= -1");

  // full echo, defaults applied
  cfg.resolved = {
      {"run",
       {{"steps", cfg.run.steps},
        {"batch_labelled", cfg.run.batch_labelled},
        {"batch_unlabelled", cfg.run.batch_unlabelled},
        {"lr", cfg.run.lr},
        {"lr_schedule", cfg.run.lr_schedule},
        {"momentum", cfg.run.momentum},
        {"optimizer", cfg.run.optimizer},
        {"seed", cfg.run.seed},
        {"eval_interval", cfg.run.eval_interval},
        {"checkpoint_interval", cfg.run.checkpoint_interval},
        {"precision", cfg.run.precision}}},
      {"consistency",
       {{"mode", to_string(cfg.consistency.mode)},
        {"gamma", cfg.consistency.gamma},
        {"distance", to_string(cfg.consistency.distance)},
        {"ema_decay", cfg.ema_decay},
        {"confidence_threshold",
         cfg.consistency.confidence_threshold ? json(*cfg.consistency.confidence_threshold) : json()},
        {"vat_xi_scale", cfg.consistency.vat.xi_scale},
        {"vat_n_power", cfg.consistency.vat.n_power},
        {"vat_epsilon", cfg.consistency.vat.epsilon}}},
      {"augment",
       {{"colour_enabled", cfg.augment.colour_enabled},
        {"brightness", cfg.augment.colour.brightness},
        {"contrast", cfg.augment.colour.contrast},
        {"saturation", cfg.augment.colour.saturation},
        {"hue", cfg.augment.colour.hue},
        {"rotation", cfg.augment.affine.rotation},
        {"translate", cfg.augment.affine.translate},
        {"scale_min", cfg.augment.affine.scale_min},
        {"scale_max", cfg.augment.affine.scale_max},
        {"hflip", cfg.augment.affine.hflip},
        {"cut_ratio", cfg.augment.cut_ratio},
        {"sup_affine", cfg.augment.sup_affine}}},
      {"arch",
       {{"in_channels", cfg.arch.in_channels},
        {"num_classes", cfg.arch.num_classes},
        {"widths", cfg.arch.widths}}},
      {"data",
       {{"height", cfg.data.height},
        {"width", cfg.data.width},
        {"count", cfg.data.count},
        {"kappa", cfg.data.kappa},
        {"noise_sigma", cfg.data.noise_sigma},
        {"shapes_min", cfg.data.shapes_min},
        {"shapes_max", cfg.data.shapes_max},
        {"radius_min", cfg.data.radius_min},
        {"radius_max", cfg.data.radius_max},
        {"seed", cfg.data_seed}}},
      {"split",
       {{"labelled", cfg.split_labelled},
        {"seed", cfg.split_seed ? json(*cfg.split_seed) : json()}}},
  };

  // seeds are excluded so the hash identifies the setting, not the run
  nlohmann::json for_hash = cfg.resolved;
  for_hash["run"].erase("seed");
  for_hash["split"].erase("seed");
  cfg.config_hash = hash_json(for_hash);
  cfg.run_id = cfg.config_hash.substr(0, 12) + "-s" + std::to_string(cfg.run.seed);
  return cfg;
}

}  // namespace coseg

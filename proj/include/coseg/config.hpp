#pragma once

#include <json.hpp>
#include <optional>
#include <string>

#include "coseg/augment.hpp"
#include "coseg/consistency.hpp"
#include "coseg/data.hpp"
#include "coseg/segnet.hpp"

namespace coseg {

// Experiment configuration: a JSON file with blocks "run", "consistency",
// "augment", "arch", "data", "split". Every field has a default; unknown
// keys anywhere are a hard error; null means "unset, use the default".
// CLI flags arrive as an override document that wins over the file. The
// fully-resolved result is echoed into the run manifest.

struct AugmentConfig {
  bool colour_enabled = true;
  ColourRanges colour{0.4, 0.4, 0.4, 0.1};
  AffineRanges affine{0.3, 8.0, 0.9, 1.1, true};
  double cut_ratio = 0.5;
  bool sup_affine = true;  // geometric augmentation of the labelled branch
};

struct RunConfig {
  int steps = 600;
  int batch_labelled = 4;
  int batch_unlabelled = 4;
  double lr = 0.05;
  std::string lr_schedule = "constant";  // or "cosine": lr * 0.5*(1+cos(pi*(t-1)/steps))
  double momentum = 0.9;
  std::string optimizer = "sgd_momentum";
  uint64_t seed = 1;
  int eval_interval = 100;
  int checkpoint_interval = 0;  // 0: checkpoint at the end only
  std::string precision = "f32";
};

struct ExperimentConfig {
  RunConfig run;
  ConsistencyConfig consistency;  // gamma/distance resolved
  double ema_decay = 0.99;
  AugmentConfig augment;
  ArchDescriptor arch;
  ShapeGenConfig data;
  uint64_t data_seed = 7;
  int split_labelled = -1;  // -1: every sample labelled
  std::optional<uint64_t> split_seed;  // default: run.seed

  nlohmann::json resolved;  // full echo with defaults applied
  std::string config_hash;  // over `resolved` minus the seeds
  std::string run_id;       // config_hash + seed
};

nlohmann::json load_json_file(const std::string& path);

// deep-merge overrides into base (objects merge, scalars replace)
void merge_config(nlohmann::json& base, const nlohmann::json& overrides);

// parse + validate + apply defaults; throws ConfigError with the offending
// key path
ExperimentConfig parse_experiment_config(const nlohmann::json& j);

// 64-bit FNV-1a over a canonical dump, as 16 hex chars
std::string hash_json(const nlohmann::json& j);

}  // namespace coseg

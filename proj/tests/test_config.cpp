#include <filesystem>
#include <fstream>
#include <regex>
#include <string>

#include "coseg/config.hpp"
#include "doctest.h"

using coseg::ExperimentConfig;
using nlohmann::json;

namespace {

ExperimentConfig parse(const json& j) { return coseg::parse_experiment_config(j); }

std::string error_of(const json& j) {
  try {
    coseg::parse_experiment_config(j);
  } catch (const coseg::ConfigError& e) {
    return e.what();
  }
  return "";
}

bool mentions(const std::string& msg, const std::string& needle) {
  return msg.find(needle) != std::string::npos;
}

std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("an empty document resolves to the documented defaults") {
  const auto cfg = parse(json::object());
  CHECK(cfg.run.steps == 600);
  CHECK(cfg.run.batch_labelled == 4);
  CHECK(cfg.run.batch_unlabelled == 4);
  CHECK(cfg.run.lr == 0.05);
  CHECK(cfg.run.lr_schedule == "constant");
  CHECK(cfg.run.momentum == 0.9);
  CHECK(cfg.run.optimizer == "sgd_momentum");
  CHECK(cfg.run.seed == 1);
  CHECK(cfg.run.eval_interval == 100);
  CHECK(cfg.run.checkpoint_interval == 0);
  CHECK(cfg.run.precision == "f32");

  CHECK(cfg.consistency.mode == coseg::ConsMode::std_aug);
  CHECK(cfg.consistency.gamma == 1.0);  // colour jitter on by default
  CHECK(cfg.consistency.distance == coseg::ConsDistance::mean_squared);
  CHECK_FALSE(cfg.consistency.confidence_threshold.has_value());
  CHECK(cfg.ema_decay == 0.99);
  CHECK(cfg.consistency.vat.xi_scale == 1e-6);
  CHECK(cfg.consistency.vat.n_power == 1);
  CHECK(cfg.consistency.vat.epsilon == 1.0);

  CHECK(cfg.augment.colour_enabled);
  CHECK(cfg.augment.colour.brightness == 0.4);
  CHECK(cfg.augment.colour.hue == 0.1);
  CHECK(cfg.augment.affine.rotation == 0.3);
  CHECK(cfg.augment.affine.translate == 8.0);
  CHECK(cfg.augment.affine.scale_min == 0.9);
  CHECK(cfg.augment.affine.scale_max == 1.1);
  CHECK(cfg.augment.affine.hflip);
  CHECK(cfg.augment.cut_ratio == 0.5);
  CHECK(cfg.augment.sup_affine);

  CHECK(cfg.arch.in_channels == 3);
  CHECK(cfg.arch.num_classes == 4);
  CHECK(cfg.arch.widths == std::vector<int>{16, 24, 40, 64});

  CHECK(cfg.data.height == 64);
  CHECK(cfg.data.width == 64);
  CHECK(cfg.data.count == 100);
  CHECK(cfg.data.kappa == 1.0);
  CHECK(cfg.data_seed == 7);
  CHECK(cfg.split_labelled == -1);
  CHECK_FALSE(cfg.split_seed.has_value());
}

TEST_CASE("unknown keys are rejected with their full path") {
  CHECK(mentions(error_of({{"runs", json::object()}}), "runs"));
  CHECK(mentions(error_of({{"run", {{"step", 5}}}}), "run.step"));
  CHECK(mentions(error_of({{"augment", {{"saturatoin", 0.2}}}}), "augment.saturatoin"));
  CHECK(mentions(error_of({{"consistency", {{"Gamma", 1.0}}}}), "consistency.Gamma"));
  CHECK(mentions(error_of({{"data", {{"sigma", 0.1}}}}), "data.sigma"));
  CHECK(mentions(error_of({{"split", {{"fraction", 0.5}}}}), "split.fraction"));
  CHECK(mentions(error_of({{"arch", {{"depth", 4}}}}), "arch.depth"));
}

TEST_CASE("wrong types are rejected with their full path") {
  CHECK(mentions(error_of({{"run", {{"steps", "many"}}}}), "run.steps"));
  CHECK(mentions(error_of({{"data", {{"kappa", "high"}}}}), "data.kappa"));
  CHECK(mentions(error_of({{"run", json::array()}}), "run"));
}

TEST_CASE("null leaves a field at its default") {
  const auto cfg = parse({{"run", {{"steps", nullptr}, {"lr", 0.01}}},
                          {"consistency", {{"gamma", nullptr}}},
                          {"split", {{"seed", nullptr}}}});
  CHECK(cfg.run.steps == 600);
  CHECK(cfg.run.lr == 0.01);
  CHECK(cfg.consistency.gamma == 1.0);
  CHECK_FALSE(cfg.split_seed.has_value());
}

TEST_CASE("weight and distance defaults follow mode and colour jitter") {
  auto with = [&](const char* mode, bool colour) {
    return parse({{"consistency", {{"mode", mode}}}, {"augment", {{"colour_enabled", colour}}}});
  };
  CHECK(with("std_aug", true).consistency.gamma == 1.0);
  CHECK(with("std_aug", false).consistency.gamma == 0.003);
  CHECK(with("ict", true).consistency.gamma == 1.0);
  CHECK(with("ict", false).consistency.gamma == 0.01);
  CHECK(with("cutout", false).consistency.gamma == 1.0);
  CHECK(with("cutmix", false).consistency.gamma == 1.0);
  CHECK(with("vat", true).consistency.gamma == 0.1);
  CHECK(with("vat", false).consistency.gamma == 0.1);
  CHECK(with("vat", true).consistency.distance == coseg::ConsDistance::kl);
  CHECK(with("cutmix", true).consistency.distance == coseg::ConsDistance::mean_squared);

  const auto explicit_gamma =
      parse({{"consistency", {{"mode", "std_aug"}, {"gamma", 0.25}}}, {"augment", {{"colour_enabled", false}}}});
  CHECK(explicit_gamma.consistency.gamma == 0.25);

  CHECK_THROWS_AS(parse({{"consistency", {{"mode", "vat"}, {"distance", "mean_squared"}}}}),
                  coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"consistency", {{"mode", "std_aug"}, {"distance", "kl"}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"consistency", {{"mode", "entropy"}}}}), coseg::ConfigError);
}

TEST_CASE("out-of-range values are rejected") {
  CHECK_THROWS_AS(parse({{"run", {{"steps", 0}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"run", {{"lr", 0.0}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"run", {{"momentum", 1.0}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"run", {{"optimizer", "adam"}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"run", {{"lr_schedule", "step"}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"run", {{"eval_interval", 0}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"run", {{"checkpoint_interval", -1}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"run", {{"precision", "f16"}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"consistency", {{"ema_decay", 1.0}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"consistency", {{"vat_epsilon", -0.5}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"consistency", {{"vat_xi_scale", 0.0}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"consistency", {{"confidence_threshold", 1.5}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"augment", {{"cut_ratio", 1.0}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"arch", {{"in_channels", 4}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"arch", {{"num_classes", 1}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"arch", {{"widths", {8, 16, 24}}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"arch", {{"widths", {8, 16, 24, 0}}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"data", {{"kappa", 2.0}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"data", {{"radius_max", 200.0}}}}), coseg::ConfigError);
  CHECK_THROWS_AS(parse({{"split", {{"labelled", -2}}}}), coseg::ConfigError);
}

TEST_CASE("overrides merge deep: objects combine, scalars replace") {
  json base = {{"run", {{"steps", 300, }, {"lr", 0.02}}}, {"augment", {{"hue", 0.05}}}};
  const json overrides = {{"run", {{"steps", 100}}},
                          {"consistency", {{"mode", "cutmix"}}},
                          {"augment", {{"hue", 0.2}, {"rotation", 0.1}}}};
  coseg::merge_config(base, overrides);
  CHECK(base["run"]["steps"] == 100);
  CHECK(base["run"]["lr"] == 0.02);
  CHECK(base["consistency"]["mode"] == "cutmix");
  CHECK(base["augment"]["hue"] == 0.2);
  CHECK(base["augment"]["rotation"] == 0.1);

  const auto cfg = parse(base);
  CHECK(cfg.run.steps == 100);
  CHECK(cfg.run.lr == 0.02);
  CHECK(cfg.consistency.mode == coseg::ConsMode::cutmix);
  CHECK(cfg.augment.colour.hue == 0.2);

  // an object override replaces a scalar wholesale
  json scalar_base = {{"run", 5}};
  coseg::merge_config(scalar_base, json{{"run", {{"steps", 7}}}});
  CHECK(scalar_base["run"]["steps"] == 7);

  // a null override merges in and then reads as unset
  json null_over = {{"run", {{"steps", nullptr}}}};
  json file = {{"run", {{"steps", 250}}}};
  coseg::merge_config(file, null_over);
  CHECK(parse(file).run.steps == 600);
}

TEST_CASE("the hash names the setting, not the seeds") {
  const auto a = parse({{"run", {{"seed", 1}}}});
  const auto b = parse({{"run", {{"seed", 9}}}, {"split", {{"seed", 3}}}});
  CHECK(a.config_hash == b.config_hash);
  CHECK(a.run_id != b.run_id);

  const auto c = parse({{"run", {{"seed", 1}, {"lr", 0.01}}}});
  CHECK(c.config_hash != a.config_hash);

  CHECK(std::regex_match(a.config_hash, std::regex("^[0-9a-f]{16}$")));
  CHECK(a.run_id == a.config_hash.substr(0, 12) + "-s1");
  CHECK(b.run_id == b.config_hash.substr(0, 12) + "-s9");
}

TEST_CASE("hashing is canonical over key order and content-sensitive") {
  json x;
  x["alpha"] = 1;
  x["beta"] = 2;
  json y;
  y["beta"] = 2;
  y["alpha"] = 1;
  CHECK(coseg::hash_json(x) == coseg::hash_json(y));
  y["beta"] = 3;
  CHECK(coseg::hash_json(x) != coseg::hash_json(y));
}

TEST_CASE("the resolved echo reparses to itself") {
  const auto cfg = parse({{"run", {{"steps", 42}, {"seed", 5}}},
                          {"consistency", {{"mode", "vat"}, {"confidence_threshold", 0.9}}},
                          {"augment", {{"colour_enabled", false}}},
                          {"data", {{"kappa", 0.5}}},
                          {"split", {{"labelled", 20}}}});
  const auto again = parse(cfg.resolved);
  CHECK(again.resolved == cfg.resolved);
  CHECK(again.config_hash == cfg.config_hash);
  CHECK(again.run_id == cfg.run_id);
  CHECK(again.consistency.gamma == 0.1);
  CHECK(*again.consistency.confidence_threshold == 0.9);
  CHECK(again.split_labelled == 20);
}

TEST_CASE("seeds survive as full 64-bit values") {
  const uint64_t big = 0xfedcba9876543210ULL;
  const auto cfg = parse({{"run", {{"seed", big}}}, {"split", {{"seed", big - 1}}}});
  CHECK(cfg.run.seed == big);
  CHECK(*cfg.split_seed == big - 1);
  const auto again = parse(cfg.resolved);
  CHECK(again.run.seed == big);
  CHECK(*again.split_seed == big - 1);
}

TEST_CASE("config files load with parse errors mapped to config errors") {
  const std::string good = tmp_path("coseg_cfg_good.json");
  {
    std::ofstream os(good);
    os << R"({"run": {"steps": 9}})";
  }
  const json j = coseg::load_json_file(good);
  CHECK(parse(j).run.steps == 9);
  std::filesystem::remove(good);

  const std::string bad = tmp_path("coseg_cfg_bad.json");
  {
    std::ofstream os(bad);
    os << "{steps: 9";
  }
  CHECK_THROWS_AS(coseg::load_json_file(bad), coseg::ConfigError);
  std::filesystem::remove(bad);

  CHECK_THROWS_AS(coseg::load_json_file(tmp_path("coseg_cfg_missing.json")), coseg::ConfigError);
}

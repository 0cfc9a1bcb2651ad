#pragma once

#include <array>
#include <json.hpp>
#include <string>
#include <vector>

#include "coseg/common.hpp"
#include "coseg/tensor.hpp"

namespace coseg {

// Synthetic shapes dataset: images of 1-3 geometric figures on a plain
// background, classes decided by geometry alone (0 background, 1 circle,
// 2 square, 3 triangle). Figure and background colours come from a fixed
// 8-entry palette with two entries per class; the overlap knob kappa blends
// between class-exclusive colours (kappa = 0) and a shared pool (kappa = 1,
// colour carries zero class information).

struct ShapeGenConfig {
  int height = 64;
  int width = 64;
  int count = 100;
  double kappa = 1.0;
  double noise_sigma = 0.02;
  int shapes_min = 1;
  int shapes_max = 3;
  double radius_min = 7.0;
  double radius_max = 14.0;

  static constexpr int kClasses = 4;
};

void validate(const ShapeGenConfig& cfg);

// the fixed palette, rows = class, two colours each
const std::array<std::array<std::array<float, 3>, 2>, 4>& shape_palette();

struct Sample {
  int id = 0;
  bool labelled = true;
  TensorF image;       // [3,H,W], values in [0,1]
  ClassMap class_map;  // empty once split() drops labels from the training view
};

struct Dataset {
  int height = 0;
  int width = 0;
  int classes = 0;
  nlohmann::json meta;  // generation config echo, includes "kappa"
  std::vector<Sample> samples;
};

// record of one placed figure, for independent re-rasterization checks
struct ShapeRecord {
  int cls = 0;  // 1 circle, 2 square, 3 triangle
  double cx = 0, cy = 0;
  double radius = 0;  // area-matched: every figure covers ~pi*radius^2
  double theta = 0;
};

// Deterministic in (cfg, seed); per-sample RNG streams are derived from
// (seed, sample id). records, when given, receives the placed figures per
// sample.
Dataset gen_shapes_dataset(const ShapeGenConfig& cfg, uint64_t seed,
                           std::vector<std::vector<ShapeRecord>>* records = nullptr);

struct SplitSpec {
  int total = 0;
  int labelled_count = 0;
  uint64_t seed = 0;
};

// Deterministic disjoint split; unlabelled samples keep their images but
// have their class maps dropped.
std::pair<std::vector<Sample>, std::vector<Sample>> split(const std::vector<Sample>& samples,
                                                          const SplitSpec& spec);

// File format:
//   magic "CSDS" | version u32 | count u32 | H u32 | W u32 | C u32
//   | meta_len u32 | meta JSON bytes
//   | per sample: id u32 | labelled u8 | image tensor (f32) | class map tensor (u8)
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// per-channel mean over all samples; the cutout fill colour
std::array<float, 3> dataset_mean_colour(const Dataset& ds);

}  // namespace coseg

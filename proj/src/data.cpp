#include "coseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "coseg/rng.hpp"
#include "coseg/tensor_io.hpp"

namespace coseg {

namespace {

constexpr double kPi = 3.14159265358979323846;

// figure circumradius as a multiple of the area-matched radius; used for
// margin and overlap checks
double bounding_factor(int cls) {
  switch (cls) {
    case 1: return 1.0;                          // circle
    case 2: return std::sqrt(kPi / 2.0);         // square, side sqrt(pi)*r, half-diagonal
    default: {
      // equilateral triangle with area pi*r^2: side a = r*sqrt(4*pi/sqrt(3))
      const double a = std::sqrt(4.0 * kPi / std::sqrt(3.0));
      return a / std::sqrt(3.0);
    }
  }
}

double max_bounding_factor() {
  return std::max({bounding_factor(1), bounding_factor(2), bounding_factor(3)});
}

bool inside_shape(const ShapeRecord& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  switch (s.cls) {
    case 1:
      return dx * dx + dy * dy <= s.radius * s.radius;
    case 2: {
      const double c = std::cos(-s.theta), sn = std::sin(-s.theta);
      const double u = c * dx - sn * dy;
      const double v = sn * dx + c * dy;
      const double half = std::sqrt(kPi) * s.radius * 0.5;
      return std::abs(u) <= half && std::abs(v) <= half;
    }
    default: {
      // vertices at circumradius R, angles theta + k*2pi/3; inside = on the
      // inner side of all three edges
      const double r_c = bounding_factor(3) * s.radius;
      double vx[3], vy[3];
      for (int k = 0; k < 3; ++k) {
        const double a = s.theta + k * 2.0 * kPi / 3.0;
        vx[k] = s.cx + r_c * std::cos(a);
        vy[k] = s.cy + r_c * std::sin(a);
      }
      for (int k = 0; k < 3; ++k) {
        const int n = (k + 1) % 3;
        const double ex = vx[n] - vx[k], ey = vy[n] - vy[k];
        const double px = x - vx[k], py = y - vy[k];
        const double cross = ex * py - ey * px;
        const double cx2 = ex * (s.cy - vy[k]) - ey * (s.cx - vx[k]);
        if (cross * cx2 < 0) return false;  // centroid side defines "inside"
      }
      return true;
    }
  }
}

}  // namespace

void validate(const ShapeGenConfig& cfg) {
  if (cfg.height < 8 || cfg.width < 8) throw ConfigError("shape gen: image too small");
  if (cfg.count < 1) throw ConfigError("shape gen: count must be >= 1");
  if (cfg.kappa < 0 || cfg.kappa > 1) throw ConfigError("shape gen: kappa must lie in [0,1]");
  if (cfg.noise_sigma < 0) throw ConfigError("shape gen: noise sigma must be >= 0");
  if (cfg.shapes_min < 0 || cfg.shapes_min > cfg.shapes_max)
    throw ConfigError("shape gen: need 0 <= shapes_min <= shapes_max");
  if (!(cfg.radius_min > 0) || cfg.radius_min > cfg.radius_max)
    throw ConfigError("shape gen: need 0 < radius_min <= radius_max");
  const double margin = max_bounding_factor() * cfg.radius_max + 1.0;
  if (2.0 * margin >= std::min(cfg.height, cfg.width))
    throw ConfigError("shape gen: radius_max " + std::to_string(cfg.radius_max) +
                      " leaves no room to place figures inside " + std::to_string(cfg.height) + "x" +
                      std::to_string(cfg.width));
}

const std::array<std::array<std::array<float, 3>, 2>, 4>& shape_palette() {
  static const std::array<std::array<std::array<float, 3>, 2>, 4> palette = {{
      {{{0.25f, 0.25f, 0.25f}, {0.75f, 0.75f, 0.75f}}},  // background greys
      {{{0.90f, 0.10f, 0.10f}, {0.90f, 0.55f, 0.10f}}},  // circle: red, orange
      {{{0.10f, 0.80f, 0.15f}, {0.10f, 0.80f, 0.80f}}},  // square: green, cyan
      {{{0.15f, 0.25f, 0.90f}, {0.85f, 0.15f, 0.85f}}},  // triangle: blue, magenta
  }};
  return palette;
}

namespace {

// kappa is the probability of drawing from the shared pool instead of the
// class's own pair
std::array<float, 3> draw_colour(Rng& rng, int cls, double kappa) {
  const auto& pal = shape_palette();
  if (rng.uniform01() < kappa) {
    const int k = rng.uniform_int(0, 7);
    return pal[static_cast<size_t>(k / 2)][static_cast<size_t>(k % 2)];
  }
  return pal[static_cast<size_t>(cls)][static_cast<size_t>(rng.uniform_int(0, 1))];
}

bool same_colour(const std::array<float, 3>& a, const std::array<float, 3>& b) {
  return a[0] == b[0] && a[1] == b[1] && a[2] == b[2];
}

}  // namespace

Dataset gen_shapes_dataset(const ShapeGenConfig& cfg, uint64_t seed,
                           std::vector<std::vector<ShapeRecord>>* records) {
  validate(cfg);
  Dataset ds;
  ds.height = cfg.height;
  ds.width = cfg.width;
  ds.classes = ShapeGenConfig::kClasses;
  ds.meta = {{"generator", "shapes"},       {"kappa", cfg.kappa},
             {"noise_sigma", cfg.noise_sigma}, {"shapes_min", cfg.shapes_min},
             {"shapes_max", cfg.shapes_max},   {"radius_min", cfg.radius_min},
             {"radius_max", cfg.radius_max},   {"seed", seed}};
  ds.samples.reserve(static_cast<size_t>(cfg.count));
  if (records) records->assign(static_cast<size_t>(cfg.count), {});

  const size_t plane = static_cast<size_t>(cfg.height) * cfg.width;
  const double margin_base = 1.0;

  for (int idx = 0; idx < cfg.count; ++idx) {
    Rng rng(seed, static_cast<uint64_t>(idx));

    const auto bg = draw_colour(rng, 0, cfg.kappa);
    const int n_shapes = rng.uniform_int(cfg.shapes_min, cfg.shapes_max);

    std::vector<ShapeRecord> placed;
    std::vector<std::array<float, 3>> colours;
    for (int s = 0; s < n_shapes; ++s) {
      const int cls = rng.uniform_int(1, 3);
      const double radius = rng.uniform(cfg.radius_min, cfg.radius_max);
      const double bound = bounding_factor(cls) * radius + margin_base;
      // rotation range respects each figure's symmetry group
      const double theta = cls == 1 ? 0.0
                         : cls == 2 ? rng.uniform(0.0, kPi / 2.0)
                                    : rng.uniform(0.0, 2.0 * kPi / 3.0);
      bool ok = false;
      ShapeRecord rec{cls, 0, 0, radius, theta};
      for (int attempt = 0; attempt < 40 && !ok; ++attempt) {
        rec.cx = rng.uniform(bound, cfg.width - 1 - bound);
        rec.cy = rng.uniform(bound, cfg.height - 1 - bound);
        ok = true;
        for (const auto& other : placed) {
          const double need = bound + bounding_factor(other.cls) * other.radius + margin_base;
          const double ddx = rec.cx - other.cx, ddy = rec.cy - other.cy;
          if (ddx * ddx + ddy * ddy < need * need) {
            ok = false;
            break;
          }
        }
      }
      if (!ok) continue;  // image keeps fewer figures rather than overlapping ones

      auto colour = draw_colour(rng, cls, cfg.kappa);
      for (int retry = 0; retry < 16 && same_colour(colour, bg); ++retry)
        colour = draw_colour(rng, cls, cfg.kappa);
      if (same_colour(colour, bg)) continue;  // kappa=1 corner: give up on this figure

      placed.push_back(rec);
      colours.push_back(colour);
    }

    Sample sample;
    sample.id = idx;
    sample.labelled = true;
    sample.class_map = ClassMap(cfg.height, cfg.width, 0);
    std::vector<float> img(3 * plane);
    for (int ch = 0; ch < 3; ++ch)
      std::fill(img.begin() + ch * plane, img.begin() + (ch + 1) * plane, bg[static_cast<size_t>(ch)]);

    for (size_t s = 0; s < placed.size(); ++s) {
      const auto& rec = placed[s];
      const double bound = bounding_factor(rec.cls) * rec.radius;
      const int y0 = std::max(0, static_cast<int>(std::floor(rec.cy - bound)));
      const int y1 = std::min(cfg.height - 1, static_cast<int>(std::ceil(rec.cy + bound)));
      const int x0 = std::max(0, static_cast<int>(std::floor(rec.cx - bound)));
      const int x1 = std::min(cfg.width - 1, static_cast<int>(std::ceil(rec.cx + bound)));
      for (int i = y0; i <= y1; ++i)
        for (int j = x0; j <= x1; ++j) {
          if (!inside_shape(rec, j, i)) continue;
          sample.class_map.set(i, j, static_cast<uint8_t>(rec.cls));
          const size_t p = static_cast<size_t>(i) * cfg.width + j;
          for (int ch = 0; ch < 3; ++ch) img[ch * plane + p] = colours[s][static_cast<size_t>(ch)];
        }
    }

    if (cfg.noise_sigma > 0) {
      for (auto& v : img) {
        const double n = v + rng.normal(0.0, cfg.noise_sigma);
        v = static_cast<float>(n < 0 ? 0 : (n > 1 ? 1 : n));
      }
    }

    sample.image = TensorF::from_data({3, cfg.height, cfg.width}, std::move(img));
    if (records) (*records)[static_cast<size_t>(idx)] = placed;
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

std::pair<std::vector<Sample>, std::vector<Sample>> split(const std::vector<Sample>& samples,
                                                          const SplitSpec& spec) {
  if (spec.total != static_cast<int>(samples.size()))
    throw ConfigError("split: spec.total " + std::to_string(spec.total) + " != dataset size " +
                      std::to_string(samples.size()));
  if (spec.labelled_count < 0 || spec.labelled_count > spec.total)
    throw ConfigError("split: labelled_count must lie in [0, total]");

  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(spec.seed, /*stream=*/0x511f7u);
  rng.shuffle(order.begin(), order.end());

  std::pair<std::vector<Sample>, std::vector<Sample>> out;
  for (size_t i = 0; i < order.size(); ++i) {
    const Sample& src = samples[static_cast<size_t>(order[i])];
    Sample s;
    s.id = src.id;
    s.image = src.image.clone();
    if (i < static_cast<size_t>(spec.labelled_count)) {
      s.labelled = true;
      s.class_map = src.class_map;
      out.first.push_back(std::move(s));
    } else {
      s.labelled = false;  // class map stays empty: not visible to training
      out.second.push_back(std::move(s));
    }
  }
  return out;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("dataset: cannot open for writing: " + path);
  detail::write_bytes(os, "CSDS", 4);
  detail::write_u32(os, 1);  // version
  detail::write_u32(os, static_cast<uint32_t>(ds.samples.size()));
  detail::write_u32(os, static_cast<uint32_t>(ds.height));
  detail::write_u32(os, static_cast<uint32_t>(ds.width));
  detail::write_u32(os, static_cast<uint32_t>(ds.classes));
  const std::string meta = ds.meta.dump();
  detail::write_u32(os, static_cast<uint32_t>(meta.size()));
  detail::write_bytes(os, meta.data(), meta.size());
  for (const auto& s : ds.samples) {
    detail::write_u32(os, static_cast<uint32_t>(s.id));
    detail::write_u8(os, s.labelled ? 1 : 0);
    write_tensor(os, s.image);
    write_tensor_u8(os, {ds.height, ds.width},
                    s.class_map.v.empty() ? std::vector<uint8_t>(static_cast<size_t>(ds.height) * ds.width, 255)
                                          : s.class_map.v);
  }
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("dataset: cannot open: " + path);
  char magic[4];
  detail::read_bytes(is, magic, 4);
  if (std::memcmp(magic, "CSDS", 4) != 0) throw DataError("dataset: bad magic in " + path);
  const uint32_t version = detail::read_u32(is);
  if (version != 1) throw DataError("dataset: unsupported version " + std::to_string(version));
  const uint32_t count = detail::read_u32(is);
  Dataset ds;
  ds.height = static_cast<int>(detail::read_u32(is));
  ds.width = static_cast<int>(detail::read_u32(is));
  ds.classes = static_cast<int>(detail::read_u32(is));
  if (ds.height < 1 || ds.width < 1 || ds.classes < 2 || ds.height > 65536 || ds.width > 65536)
    throw DataError("dataset: header dimensions out of range");
  const uint32_t meta_len = detail::read_u32(is);
  if (meta_len > (1u << 20)) throw DataError("dataset: oversized metadata block");
  std::string meta(meta_len, '\0');
  detail::read_bytes(is, meta.data(), meta.size());
  try {
    ds.meta = meta.empty() ? nlohmann::json::object() : nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dataset: bad metadata json: ") + e.what());
  }
  ds.samples.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Sample s;
    s.id = static_cast<int>(detail::read_u32(is));
    s.labelled = detail::read_u8(is) != 0;
    AnyTensor img = read_tensor(is);
    if (img.dtype != DType::f32 || img.shape != std::vector<int>{3, ds.height, ds.width})
      throw DataError("dataset: sample image has unexpected dtype/shape");
    s.image = TensorF::from_data(img.shape, std::move(img.f32));
    AnyTensor cm = read_tensor(is);
    if (cm.dtype != DType::u8 || cm.shape != std::vector<int>{ds.height, ds.width})
      throw DataError("dataset: sample class map has unexpected dtype/shape");
    s.class_map = ClassMap(ds.height, ds.width);
    s.class_map.v = std::move(cm.u8);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::array<float, 3> dataset_mean_colour(const Dataset& ds) {
  if (ds.samples.empty()) throw DataError("dataset_mean_colour: empty dataset");
  std::array<double, 3> acc = {0, 0, 0};
  const size_t plane = static_cast<size_t>(ds.height) * ds.width;
  for (const auto& s : ds.samples) {
    const auto& v = s.image.values();
    for (int ch = 0; ch < 3; ++ch)
      for (size_t i = 0; i < plane; ++i) acc[static_cast<size_t>(ch)] += v[ch * plane + i];
  }
  const double n = static_cast<double>(plane) * ds.samples.size();
  return {static_cast<float>(acc[0] / n), static_cast<float>(acc[1] / n), static_cast<float>(acc[2] / n)};
}

}  // namespace coseg

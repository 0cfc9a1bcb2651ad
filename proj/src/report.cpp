#include "coseg/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <optional>
#include <sstream>

namespace coseg {

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0, 0};
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0};
  double acc = 0;
  for (double x : xs) acc += (x - mean) * (x - mean);
  return {mean, std::sqrt(acc / static_cast<double>(xs.size() - 1))};
}

namespace {

using nlohmann::json;

std::optional<RunSummary> read_run_dir(const std::string& dir, std::vector<std::string>& warnings) {
  const std::string mpath = dir + "/manifest.json";
  std::ifstream ms(mpath);
  if (!ms) {
    warnings.push_back(dir + ": no manifest.json, skipped");
    return std::nullopt;
  }
  json m;
  try {
    ms >> m;
  } catch (const json::exception& e) {
    warnings.push_back(dir + ": unreadable manifest (" + e.what() + "), skipped");
    return std::nullopt;
  }
  try {
    if (m.value("status", "") != "complete") {
      warnings.push_back(dir + ": run incomplete, skipped");
      return std::nullopt;
    }
    RunSummary rs;
    rs.dir = dir;
    rs.run_id = m.at("run_id").get<std::string>();
    rs.seed = m.at("seed").get<uint64_t>();
    const json& cfg = m.at("config");
    rs.mode = cfg.at("consistency").at("mode").get<std::string>();
    if (cfg.at("consistency").at("gamma").get<double>() == 0.0) rs.mode = "supervised";
    rs.colour = cfg.at("augment").at("colour_enabled").get<bool>();
    rs.labelled = cfg.at("split").at("labelled").get<int>();
    rs.final_miou = m.at("result").at("final_miou").get<double>();
    rs.best_miou = m.at("result").at("best_miou").get<double>();

    std::ifstream cs(dir + "/metrics.csv");
    if (!cs) {
      warnings.push_back(dir + ": no metrics.csv, skipped");
      return std::nullopt;
    }
    std::string line;
    while (std::getline(cs, line)) {
      if (line.empty() || line[0] == '#' || line.rfind("run_id,", 0) == 0) continue;
      // run_id,step,split,metric,value
      std::istringstream ss(line);
      std::string run_id, step_s, split, metric, value_s;
      if (!std::getline(ss, run_id, ',') || !std::getline(ss, step_s, ',') ||
          !std::getline(ss, split, ',') || !std::getline(ss, metric, ',') ||
          !std::getline(ss, value_s))
        continue;
      if (split == "val" && metric == "miou")
        rs.curve.emplace_back(std::stoi(step_s), std::stod(value_s));
    }
    return rs;
  } catch (const std::exception& e) {
    warnings.push_back(dir + ": " + e.what() + ", skipped");
    return std::nullopt;
  }
}

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

Report build_report(const std::vector<std::string>& run_dirs) {
  if (run_dirs.empty()) throw ConfigError("report: no run directories given");
  Report rep;
  std::map<std::tuple<std::string, bool, int>, ReportGroup> groups;
  size_t usable = 0;
  for (const auto& dir : run_dirs) {
    auto rs = read_run_dir(dir, rep.warnings);
    if (!rs) continue;
    ++usable;
    auto key = std::make_tuple(rs->mode, rs->colour, rs->labelled);
    auto& g = groups[key];
    g.mode = rs->mode;
    g.colour = rs->colour;
    g.labelled = rs->labelled;
    g.runs.push_back(std::move(*rs));
  }
  if (usable == 0) throw DataError("report: none of the run directories were usable");
  for (auto& [key, g] : groups) {
    std::vector<double> finals, bests;
    std::sort(g.runs.begin(), g.runs.end(),
              [](const RunSummary& a, const RunSummary& b) { return a.seed < b.seed; });
    for (const auto& r : g.runs) {
      finals.push_back(r.final_miou);
      bests.push_back(r.best_miou);
    }
    std::tie(g.mean_final, g.std_final) = mean_std(finals);
    std::tie(g.mean_best, g.std_best) = mean_std(bests);
    rep.groups.push_back(std::move(g));
  }
  return rep;
}

std::string report_text(const Report& rep) {
  std::ostringstream os;
  os << "mode         colour  labelled  runs  final mIoU          best mIoU\n";
  os << "-----------  ------  --------  ----  ------------------  ------------------\n";
  for (const auto& g : rep.groups) {
    char line[256];
    std::snprintf(line, sizeof line, "%-11s  %-6s  %8s  %4zu  %s +/- %s  %s +/- %s\n", g.mode.c_str(),
                  g.colour ? "on" : "off", g.labelled < 0 ? "all" : std::to_string(g.labelled).c_str(),
                  g.runs.size(), fmt(g.mean_final).c_str(), fmt(g.std_final).c_str(),
                  fmt(g.mean_best).c_str(), fmt(g.std_best).c_str());
    os << line;
  }
  for (const auto& w : rep.warnings) os << "warning: " << w << "\n";
  return os.str();
}

std::string report_csv(const Report& rep) {
  std::ostringstream os;
  os << "# coseg-report-v1\n";
  os << "mode,colour_aug,labelled,runs,mean_final_miou,std_final_miou,mean_best_miou,std_best_miou\n";
  for (const auto& g : rep.groups) {
    char line[256];
    std::snprintf(line, sizeof line, "%s,%s,%d,%zu,%.17g,%.17g,%.17g,%.17g\n", g.mode.c_str(),
                  g.colour ? "on" : "off", g.labelled, g.runs.size(), g.mean_final, g.std_final,
                  g.mean_best, g.std_best);
    os << line;
  }
  return os.str();
}

std::string curves_svg(const Report& rep) {
  constexpr int kW = 840, kH = 480;
  constexpr int kL = 60, kR = 220, kT = 24, kB = 44;  // margins; right holds the legend
  const int plot_w = kW - kL - kR, plot_h = kH - kT - kB;

  int max_step = 1;
  for (const auto& g : rep.groups)
    for (const auto& r : g.runs)
      for (const auto& [s, v] : r.curve) max_step = std::max(max_step, s);

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                  "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2"};
  constexpr int kPaletteN = 10;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << kW << " " << kH
     << "\" font-family=\"monospace\" font-size=\"12\">\n";
  os << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
  // axes
  os << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kT + plot_h
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kL << "\" y1=\"" << kT + plot_h << "\" x2=\"" << kL + plot_w << "\" y2=\""
     << kT + plot_h << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double frac = i / 4.0;
    const int y = kT + static_cast<int>((1 - frac) * plot_h);
    os << "<line x1=\"" << kL - 4 << "\" y1=\"" << y << "\" x2=\"" << kL << "\" y2=\"" << y
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << kL - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << fmt(frac, "%.2f")
       << "</text>\n";
    const int x = kL + static_cast<int>(frac * plot_w);
    os << "<line x1=\"" << x << "\" y1=\"" << kT + plot_h << "\" x2=\"" << x << "\" y2=\""
       << kT + plot_h + 4 << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << x << "\" y=\"" << kT + plot_h + 18 << "\" text-anchor=\"middle\">"
       << static_cast<int>(frac * max_step) << "</text>\n";
  }
  os << "<text x=\"" << kL + plot_w / 2 << "\" y=\"" << kH - 8
     << "\" text-anchor=\"middle\">step</text>\n";
  os << "<text x=\"16\" y=\"" << kT + plot_h / 2
     << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << kT + plot_h / 2
     << ")\">val mIoU</text>\n";

  int idx = 0, legend_y = kT + 8;
  for (const auto& g : rep.groups) {
    for (const auto& r : g.runs) {
      if (r.curve.empty()) continue;
      const char* colour = palette[idx % kPaletteN];
      os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
      for (const auto& [s, v] : r.curve) {
        const double x = kL + plot_w * static_cast<double>(s) / max_step;
        const double y = kT + plot_h * (1.0 - std::min(1.0, std::max(0.0, v)));
        os << fmt(x, "%.1f") << "," << fmt(y, "%.1f") << " ";
      }
      os << "\"/>\n";
      os << "<line x1=\"" << kL + plot_w + 12 << "\" y1=\"" << legend_y << "\" x2=\"" << kL + plot_w + 32
         << "\" y2=\"" << legend_y << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
      os << "<text x=\"" << kL + plot_w + 38 << "\" y=\"" << legend_y + 4 << "\">" << g.mode
         << (g.colour ? "+colour" : "") << " s" << r.seed << "</text>\n";
      legend_y += 16;
      ++idx;
    }
  }
  os << "</svg>\n";
  return os.str();
}

void write_report_files(const Report& rep, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream os(out_dir + "/" + name, std::ios::binary);
    if (!os) throw DataError("report: cannot write " + out_dir + "/" + name);
    os << content;
  };
  write("report.txt", report_text(rep));
  write("report.csv", report_csv(rep));
  write("curves.svg", curves_svg(rep));
}

}  // namespace coseg

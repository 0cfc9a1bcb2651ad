#pragma once

#include <string>
#include <vector>

#include "coseg/common.hpp"

namespace coseg {

// Aggregation of completed run directories into a mode x colour x labelled
// table (text + CSV) and an SVG learning-curve plot. Reports are built from
// the run artifacts alone; no live model is involved.

struct RunSummary {
  std::string dir;
  std::string run_id;
  std::string mode;
  bool colour = false;
  int labelled = -1;  // -1: fully labelled
  uint64_t seed = 0;
  double final_miou = 0, best_miou = 0;
  std::vector<std::pair<int, double>> curve;  // validation mIoU per eval step
};

struct ReportGroup {
  std::string mode;
  bool colour = false;
  int labelled = -1;
  std::vector<RunSummary> runs;
  double mean_final = 0, std_final = 0;
  double mean_best = 0, std_best = 0;
};

struct Report {
  std::vector<ReportGroup> groups;
  std::vector<std::string> warnings;  // incomplete/unreadable run dirs, skipped
};

// Reads each run dir's manifest.json and metrics.csv. Incomplete or broken
// directories become warnings, never errors; zero usable runs is an error.
Report build_report(const std::vector<std::string>& run_dirs);

std::string report_text(const Report& rep);

// First line "# coseg-report-v1", then a fixed column header.
std::string report_csv(const Report& rep);

// Minimal self-contained plot: one polyline per run, axes and ticks.
std::string curves_svg(const Report& rep);

// Writes report.txt, report.csv, curves.svg under out_dir.
void write_report_files(const Report& rep, const std::string& out_dir);

// sample mean and standard deviation (n-1 denominator; 0 for n < 2)
std::pair<double, double> mean_std(const std::vector<double>& xs);

}  // namespace coseg

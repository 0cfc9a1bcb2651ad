#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "coseg/report.hpp"
#include "doctest.h"

using coseg::build_report;
using coseg::mean_std;
using coseg::Report;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

struct TmpDir {
  fs::path p;
  explicit TmpDir(const char* name) : p(fs::temp_directory_path() / name) {
    fs::remove_all(p);
    fs::create_directories(p);
  }
  ~TmpDir() { fs::remove_all(p); }
  std::string str() const { return p.string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  REQUIRE(os);
  os << content;
}

struct FakeRun {
  std::string mode = "std_aug";
  double gamma = 1.0;
  bool colour = true;
  int labelled = 20;
  uint64_t seed = 1;
  double final_miou = 0.5, best_miou = 0.6;
  std::vector<std::pair<int, double>> curve = {{100, 0.4}, {200, 0.5}};
  std::string status = "complete";
};

// Lays out manifest.json + metrics.csv the way a finished run leaves them.
std::string write_run_dir(const fs::path& root, const std::string& name, const FakeRun& r) {
  const fs::path dir = root / name;
  fs::create_directories(dir);
  json m = {
      {"status", r.status},
      {"run_id", name},
      {"seed", r.seed},
      {"config",
       {{"consistency", {{"mode", r.mode}, {"gamma", r.gamma}}},
        {"augment", {{"colour_enabled", r.colour}}},
        {"split", {{"labelled", r.labelled}}}}},
      {"result", {{"final_miou", r.final_miou}, {"best_miou", r.best_miou}}},
  };
  write_file(dir / "manifest.json", m.dump(2));
  std::ostringstream csv;
  csv << "# coseg-metrics-v1\nrun_id,step,split,metric,value\n";
  for (const auto& [s, v] : r.curve) {
    csv << name << "," << s << ",train,loss_total,9.9\n";  // must be ignored by the curve reader
    csv << name << "," << s << ",val,miou," << v << "\n";
  }
  write_file(dir / "metrics.csv", csv.str());
  return dir.string();
}

size_t count_of(const std::string& hay, const std::string& needle) {
  size_t n = 0;
  for (size_t at = hay.find(needle); at != std::string::npos; at = hay.find(needle, at + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("mean and std match hand computations") {
  auto [m0, s0] = mean_std({});
  CHECK(m0 == 0.0);
  CHECK(s0 == 0.0);

  auto [m1, s1] = mean_std({0.7});
  CHECK(m1 == 0.7);
  CHECK(s1 == 0.0);

  // {1,2,3,4}: mean 2.5, sample variance (2.25+0.25+0.25+2.25)/3 = 5/3
  auto [m2, s2] = mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(m2 == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(s2 == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
}

TEST_CASE("runs group by mode, colour, and labelled count with exact statistics") {
  TmpDir tmp("coseg_report_groups");
  FakeRun a;  // cutmix+colour, two seeds, deliberately written out of seed order
  a.mode = "cutmix";
  a.seed = 2;
  a.final_miou = 0.8;
  a.best_miou = 0.9;
  FakeRun b = a;
  b.seed = 1;
  b.final_miou = 0.6;
  b.best_miou = 0.7;
  FakeRun c;  // std_aug without colour, a separate group
  c.colour = false;
  c.seed = 3;
  c.final_miou = 0.5;
  c.best_miou = 0.5;

  const std::vector<std::string> dirs = {
      write_run_dir(tmp.p, "a-s2", a),
      write_run_dir(tmp.p, "b-s1", b),
      write_run_dir(tmp.p, "c-s3", c),
  };
  const Report rep = build_report(dirs);
  CHECK(rep.warnings.empty());
  REQUIRE(rep.groups.size() == 2);

  const auto* cutmix = &rep.groups[0];
  const auto* stdaug = &rep.groups[1];
  if (cutmix->mode != "cutmix") std::swap(cutmix, stdaug);
  REQUIRE(cutmix->mode == "cutmix");
  REQUIRE(stdaug->mode == "std_aug");

  REQUIRE(cutmix->runs.size() == 2);
  CHECK(cutmix->runs[0].seed == 1);  // sorted by seed, not by input order
  CHECK(cutmix->runs[1].seed == 2);
  CHECK(cutmix->mean_final == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(cutmix->std_final ==
        doctest::Approx(std::sqrt((0.01 + 0.01) / 1.0)).epsilon(1e-12));
  CHECK(cutmix->mean_best == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(cutmix->colour);
  CHECK(cutmix->labelled == 20);

  CHECK(stdaug->runs.size() == 1);
  CHECK_FALSE(stdaug->colour);
  CHECK(stdaug->mean_final == 0.5);
  CHECK(stdaug->std_final == 0.0);

  // validation curve came from the val/miou rows only
  REQUIRE(cutmix->runs[0].curve.size() == 2);
  CHECK(cutmix->runs[0].curve[0] == std::pair<int, double>{100, 0.4});
  CHECK(cutmix->runs[0].curve[1] == std::pair<int, double>{200, 0.5});
}

TEST_CASE("gamma zero reports as supervised regardless of mode") {
  TmpDir tmp("coseg_report_sup");
  FakeRun r;
  r.mode = "cutmix";
  r.gamma = 0.0;
  const Report rep = build_report({write_run_dir(tmp.p, "r-s1", r)});
  REQUIRE(rep.groups.size() == 1);
  CHECK(rep.groups[0].mode == "supervised");
}

TEST_CASE("broken run directories become warnings, not errors") {
  TmpDir tmp("coseg_report_broken");
  const std::string good = write_run_dir(tmp.p, "good-s1", FakeRun{});

  const fs::path no_manifest = tmp.p / "no_manifest";
  fs::create_directories(no_manifest);

  const fs::path bad_json = tmp.p / "bad_json";
  fs::create_directories(bad_json);
  write_file(bad_json / "manifest.json", "{not json");

  FakeRun running;
  running.status = "running";
  const std::string incomplete = write_run_dir(tmp.p, "incomplete-s1", running);

  const std::string no_csv = write_run_dir(tmp.p, "no_csv-s1", FakeRun{});
  fs::remove(fs::path(no_csv) / "metrics.csv");

  const Report rep = build_report(
      {good, no_manifest.string(), bad_json.string(), incomplete, no_csv});
  REQUIRE(rep.groups.size() == 1);
  CHECK(rep.groups[0].runs.size() == 1);
  REQUIRE(rep.warnings.size() == 4);

  const std::string all = [&] {
    std::string s;
    for (const auto& w : rep.warnings) s += w + "\n";
    return s;
  }();
  CHECK(all.find("no manifest.json") != std::string::npos);
  CHECK(all.find("unreadable manifest") != std::string::npos);
  CHECK(all.find("run incomplete") != std::string::npos);
  CHECK(all.find("no metrics.csv") != std::string::npos);

  // warnings surface in the text rendering too
  const std::string text = coseg::report_text(rep);
  CHECK(count_of(text, "warning:") == 4);
}

TEST_CASE("no usable runs is an error, no dirs at all is a config error") {
  TmpDir tmp("coseg_report_unusable");
  const fs::path empty = tmp.p / "empty";
  fs::create_directories(empty);
  CHECK_THROWS_AS(build_report({empty.string()}), coseg::DataError);
  CHECK_THROWS_AS(build_report({}), coseg::ConfigError);
}

TEST_CASE("csv rendering round-trips the group statistics") {
  TmpDir tmp("coseg_report_csv");
  FakeRun a;
  a.final_miou = 1.0 / 3.0;  // not representable in decimal; %.17g must round-trip it
  a.best_miou = 2.0 / 3.0;
  const Report rep = build_report({write_run_dir(tmp.p, "a-s1", a)});
  const std::string csv = coseg::report_csv(rep);

  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  CHECK(line == "# coseg-report-v1");
  std::getline(is, line);
  CHECK(line ==
        "mode,colour_aug,labelled,runs,mean_final_miou,std_final_miou,mean_best_miou,std_best_miou");
  REQUIRE(std::getline(is, line));
  std::vector<std::string> f;
  std::istringstream ls(line);
  std::string tok;
  while (std::getline(ls, tok, ',')) f.push_back(tok);
  REQUIRE(f.size() == 8);
  CHECK(f[0] == "std_aug");
  CHECK(f[1] == "on");
  CHECK(f[2] == "20");
  CHECK(f[3] == "1");
  CHECK(std::stod(f[4]) == 1.0 / 3.0);
  CHECK(std::stod(f[6]) == 2.0 / 3.0);
  CHECK_FALSE(std::getline(is, line));  // one data line per group
}

TEST_CASE("svg plot holds one polyline per run plus a legend entry") {
  TmpDir tmp("coseg_report_svg");
  FakeRun a;
  a.seed = 4;
  FakeRun b;
  b.mode = "vat";
  b.seed = 9;
  b.curve = {{50, 0.2}, {100, 0.35}, {150, 0.5}};
  const Report rep =
      build_report({write_run_dir(tmp.p, "a-s4", a), write_run_dir(tmp.p, "b-s9", b)});
  const std::string svg = coseg::curves_svg(rep);

  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(count_of(svg, "<polyline") == 2);
  CHECK(svg.find("s4") != std::string::npos);
  CHECK(svg.find("s9") != std::string::npos);
  CHECK(svg.find("val mIoU") != std::string::npos);
}

TEST_CASE("write_report_files leaves the three artifacts on disk") {
  TmpDir tmp("coseg_report_files");
  const Report rep = build_report({write_run_dir(tmp.p, "a-s1", FakeRun{})});
  const std::string out = (tmp.p / "report_out").string();
  coseg::write_report_files(rep, out);
  CHECK(slurp(out + "/report.txt") == coseg::report_text(rep));
  CHECK(slurp(out + "/report.csv") == coseg::report_csv(rep));
  CHECK(slurp(out + "/curves.svg") == coseg::curves_svg(rep));
}

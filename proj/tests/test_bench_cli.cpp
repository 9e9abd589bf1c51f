#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "trained_model.hpp"
#include "unidiff/config.hpp"
#include "unidiff/errors.hpp"
#include "unidiff/experiment.hpp"

using namespace unidiff;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Report whose mean top-1 is a fixed function of two config values.
Runner stub_runner(const std::string& row_key, const std::string& col_key,
                   double (*objective)(double, double)) {
  return [=](const Json& cfg) {
    RunReport r;
    r.config_hash = config_hash(cfg);
    SeedResult s;
    s.top1 = objective(get_config_value(cfg, row_key).get<double>(),
                       get_config_value(cfg, col_key).get<double>());
    s.top5 = 1.0;
    r.seeds.push_back(s);
    summarize(r);
    return r;
  };
}

RunReport sample_report() {
  RunReport r;
  r.config_hash = "abc123";
  r.cell = Json{{"generation.strength", 0.5}, {"utilization.p", 0.25}};
  for (std::uint64_t seed : {0, 1}) {
    SeedResult s;
    s.seed = seed;
    s.top1 = 0.5 + 0.1 * static_cast<double>(seed);
    s.top5 = 0.9;
    s.per_class = {0.25, 0.75};
    s.fid = 3.5;
    s.precision = 0.8;
    s.recall = 0.6;
    s.knn_k = 3;
    s.n_real = 24;
    s.n_synthetic = 48;
    s.concept_loss = {0.3, 0.2};
    s.lora_loss_before = 0.2;
    s.lora_loss_after = 0.15;
    s.notes = {"filter: global"};
    s.stage_seconds = {{"generate", 1.5}};
    r.seeds.push_back(s);
  }
  summarize(r);
  return r;
}

Json tiny_run(const fs::path& out) {
  return testutil::cached_config({{"dataset", {{"kshot", 2}}},
                                  {"generation", {{"ratio", 2}, {"sampler_steps", 5}}},
                                  {"classifier", {{"epochs", 3}}},
                                  {"metrics", {{"fid", true}, {"precision_recall", true}}},
                                  {"seeds", {0, 1}},
                                  {"output_dir", out.string()}});
}

}  // namespace

TEST(Config, MergeValidatesKeysAndTypes) {
  const Json cfg = merge_config(Json::object());
  EXPECT_EQ(cfg, default_config());
  EXPECT_THROW(merge_config(Json{{"generation", {{"strenght", 0.5}}}}), ParameterError);
  EXPECT_THROW(merge_config(Json{{"generation", {{"strength", "high"}}}}), ParameterError);
  EXPECT_THROW(merge_config(Json{{"format_version", 2}}), FormatError);
  EXPECT_THROW(merge_config(Json::array()), ParameterError);
  Json bad = merge_config(Json{{"dataset", {{"fraction", 0.0}}}});
  EXPECT_THROW(validate_config(bad), ParameterError);
  EXPECT_NO_THROW(validate_config(cfg));
}

TEST(Config, HashIgnoresKeyOrderAndTracksSemantics) {
  const Json a = Json::parse(R"({"seeds": [1, 2], "generation": {"strength": 0.5, "ratio": 3}})");
  const Json b = Json::parse(R"({"generation": {"ratio": 3, "strength": 0.5}, "seeds": [1, 2]})");
  EXPECT_EQ(config_hash(merge_config(a)), config_hash(merge_config(b)));
  Json c = merge_config(a);
  set_config_value(c, "generation.strength", 0.51);
  EXPECT_NE(config_hash(c), config_hash(merge_config(a)));
  EXPECT_EQ(config_hash(c).size(), 16u);
}

TEST(Config, OverridesAndDottedAccess) {
  Json cfg = default_config();
  apply_override(cfg, "generation.strength=0.25");
  apply_override(cfg, "generation.strategy=interclass_mix");
  apply_override(cfg, "classifier.lr=1");
  apply_override(cfg, "seeds=[3,4]");
  EXPECT_EQ(get_config_value(cfg, "generation.strength"), 0.25);
  EXPECT_EQ(get_config_value(cfg, "generation.strategy"), "interclass_mix");
  EXPECT_EQ(get_config_value(cfg, "classifier.lr").get<double>(), 1.0);
  EXPECT_EQ(cfg["seeds"], Json::parse("[3,4]"));
  EXPECT_THROW(apply_override(cfg, "generation.bogus=1"), ParameterError);
  EXPECT_THROW(apply_override(cfg, "noequals"), ParameterError);
  EXPECT_THROW(apply_override(cfg, "generation.ratio=1.5"), ParameterError);
  EXPECT_THROW(get_config_value(cfg, "dataset.nope"), ParameterError);

  testutil::TempDir dir("config");
  std::ofstream(dir.path() / "c.json") << R"({
    // comments are allowed
    "generation": {"strength": 0.3}
  })";
  EXPECT_EQ(load_config(dir.path() / "c.json")["generation"]["strength"], 0.3);
  std::ofstream(dir.path() / "bad.json") << "{ nope";
  EXPECT_THROW(load_config(dir.path() / "bad.json"), FormatError);
  EXPECT_THROW(load_config(dir.path() / "missing.json"), IoError);
}

TEST(Report, JsonRoundTripAndSummary) {
  const RunReport r = sample_report();
  EXPECT_NEAR(r.top1_mean, 0.55, 1e-12);
  EXPECT_NEAR(r.top1_std, std::sqrt(0.005), 1e-12);  // sample std of {0.5, 0.6}
  EXPECT_FALSE(r.failed);
  const Json j = report_to_json(r);
  EXPECT_EQ(report_to_json(report_from_json(j)), j);
  EXPECT_EQ(report_to_json(report_from_json(Json::parse(j.dump()))).dump(), j.dump());
  EXPECT_EQ(j.dump().find("stage_seconds"), std::string::npos);
  EXPECT_EQ(timing_to_json(r)["seeds"][0]["stage_seconds"]["generate"], 1.5);

  RunReport one = r;
  one.seeds.resize(1);
  one.seeds[0].failed_stage = "generate";
  summarize(one);
  EXPECT_TRUE(one.failed);
  EXPECT_EQ(one.top1_std, 0.0);
}

TEST(Report, EmitFormats) {
  testutil::TempDir dir("emit");
  std::vector<RunReport> reports;
  for (double s : {0.1, 0.5, 0.9})
    for (double p : {0.25, 0.5, 0.75}) {
      RunReport r = sample_report();
      r.cell = Json{{"generation.strength", s}, {"utilization.p", p}};
      reports.push_back(r);
    }
  emit_report(reports, ReportFormat::json, dir.path() / "r.json");
  const Json arr = Json::parse(slurp(dir.path() / "r.json"));
  ASSERT_EQ(arr.size(), 9u);
  EXPECT_EQ(arr[4], report_to_json(reports[4]));

  emit_report(reports, ReportFormat::csv, dir.path() / "r.csv");
  const auto csv = lines(dir.path() / "r.csv");
  ASSERT_EQ(csv.size(), 10u);
  EXPECT_EQ(csv[0].rfind("config_hash,generation.strength,utilization.p,", 0), 0u);

  emit_report(reports, ReportFormat::plotdata, dir.path() / "p.csv");
  const auto plot = lines(dir.path() / "p.csv");
  ASSERT_EQ(plot.size(), 10u);
  EXPECT_EQ(plot[0], "strength,p,top1");
  EXPECT_EQ(plot[1], "0.1,0.25,0.550000");

  EXPECT_THROW(emit_report({}, ReportFormat::json, dir.path() / "x.json"), ParameterError);
  EXPECT_THROW(emit_report(reports, ReportFormat::csv, "/proc/no/such/dir/x.csv"), IoError);
  EXPECT_EQ(report_format_from_string("plotdata"), ReportFormat::plotdata);
  EXPECT_THROW(report_format_from_string("xml"), ParameterError);
}

TEST(Grid, StubArgmaxMatchesBruteForce) {
  auto objective = [](double s, double p) { return 1.0 - (s - 0.5) * (s - 0.5) - 2.0 * (p - 0.7) * (p - 0.7); };
  const GridAxis rows{"generation.strength", {0.1, 0.3, 0.5, 0.7, 0.9}};
  const GridAxis cols{"utilization.p", {0.0, 0.25, 0.5, 0.75, 1.0}};
  const auto g = grid_search(Json{{"output_dir", "unused"}}, rows, cols,
                             stub_runner(rows.key, cols.key, objective));
  ASSERT_EQ(g.cells.size(), 25u);
  std::size_t best = 0;
  double best_v = -1e9;
  for (std::size_t i = 0; i < rows.values.size(); ++i)
    for (std::size_t j = 0; j < cols.values.size(); ++j) {
      const double v = objective(rows.values[i].get<double>(), cols.values[j].get<double>());
      if (v > best_v) {
        best_v = v;
        best = i * cols.values.size() + j;
      }
    }
  EXPECT_EQ(g.best, best);
  EXPECT_EQ(g.cells[4].cell, (Json{{"generation.strength", 0.1}, {"utilization.p", 1.0}}));
}

TEST(Grid, TiesGoToSmallerRowThenColumn) {
  auto flat = [](double, double) { return 0.5; };
  const GridAxis rows{"generation.strength", {0.9, 0.5}};
  const GridAxis cols{"utilization.p", {0.75, 0.25}};
  const auto g = grid_search(Json::object(), rows, cols, stub_runner(rows.key, cols.key, flat));
  EXPECT_EQ(g.best, 3u);  // s = 0.5, p = 0.25
}

TEST(Grid, InvalidCellFailsBeforeAnyRun) {
  int calls = 0;
  const Runner counting = [&](const Json&) {
    ++calls;
    return RunReport{};
  };
  const GridAxis rows{"generation.strength", {0.5, 1.5}};
  const GridAxis cols{"utilization.p", {0.5}};
  EXPECT_THROW(grid_search(Json::object(), rows, cols, counting), ParameterError);
  EXPECT_THROW(grid_search(Json::object(), GridAxis{"generation.strength", {}}, cols, counting),
               ParameterError);
  EXPECT_THROW(grid_search(Json::object(), GridAxis{"generation.nothing", {1}}, cols, counting),
               ParameterError);
  EXPECT_EQ(calls, 0);
}

TEST(Grid, CsvHasOneRowPerCell) {
  testutil::TempDir dir("grid");
  auto f = [](double s, double p) { return s + p; };
  const GridAxis rows{"generation.strength", {0.1, 0.5, 0.9}};
  const GridAxis cols{"utilization.p", {0.25, 0.5, 0.75}};
  const auto g = grid_search(Json::object(), rows, cols, stub_runner(rows.key, cols.key, f));
  write_grid_csv(g, dir.path() / "grid.csv");
  EXPECT_EQ(lines(dir.path() / "grid.csv").size(), 10u);
  EXPECT_EQ(g.best, 8u);
}

TEST(Sweep, CellsAndBaselineColumn) {
  std::vector<Json> seen;
  const Runner record = [&](const Json& cfg) {
    seen.push_back(cfg);
    RunReport r;
    r.seeds.push_back(SeedResult{});
    summarize(r);
    return r;
  };
  const auto g = data_size_sweep(Json::object(), {0.2, 0.4, 1.0}, {0, 1, 5}, record);
  ASSERT_EQ(g.cells.size(), 9u);
  ASSERT_EQ(seen.size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) {
    const int ratio = std::vector<int>{0, 1, 5}[i % 3];
    EXPECT_EQ(seen[i]["generation"]["enabled"].get<bool>(), ratio != 0);
    if (ratio != 0) {
      EXPECT_EQ(seen[i]["generation"]["ratio"], ratio);
    }
    EXPECT_EQ(seen[i]["dataset"]["fraction"], (std::vector<double>{0.2, 0.4, 1.0}[i / 3]));
  }
  EXPECT_NE(seen[0]["output_dir"], seen[1]["output_dir"]);
  EXPECT_THROW(data_size_sweep(Json::object(), {0.0}, {1}, record), ParameterError);
  EXPECT_THROW(data_size_sweep(Json::object(), {0.5}, {-1}, record), ParameterError);
}

TEST(Experiment, BaselineArmTrainsOnRealDataOnly) {
  testutil::TempDir dir("baseline");
  const Json cfg = testutil::cached_config({{"generation", {{"enabled", false}}},
                                            {"classifier", {{"epochs", 2}}},
                                            {"seeds", {0, 1}},
                                            {"output_dir", dir.path().string()}});
  const RunReport r = run_experiment(cfg);
  ASSERT_EQ(r.seeds.size(), 2u);
  EXPECT_FALSE(r.failed);
  for (const auto& s : r.seeds) {
    EXPECT_EQ(s.n_synthetic, 0);
    EXPECT_EQ(s.n_real, 240);
    EXPECT_GE(s.top1, 0.0);
    EXPECT_LE(s.top1, s.top5);
  }
  EXPECT_TRUE(fs::exists(dir.path() / "report.json"));
  EXPECT_TRUE(fs::exists(dir.path() / "timing.json"));
  EXPECT_TRUE(fs::exists(dir.path() / "seed-0" / "real" / "manifest.json"));
  EXPECT_EQ(report_from_json(Json::parse(slurp(dir.path() / "report.json"))).config_hash, r.config_hash);
}

TEST(Experiment, GeneratingRunIsReproducible) {
  testutil::TempDir a("run-a"), b("run-b");
  const RunReport ra = run_experiment(tiny_run(a.path()));
  const RunReport rb = run_experiment(tiny_run(b.path()));
  ASSERT_FALSE(ra.failed) << ra.seeds[0].error;
  EXPECT_EQ(ra.seeds[0].n_synthetic, 48);
  EXPECT_TRUE(ra.seeds[0].fid.has_value());
  EXPECT_TRUE(ra.seeds[0].precision.has_value());
  EXPECT_EQ(slurp(a.path() / "report.json"), slurp(b.path() / "report.json"));
  const Json timing = Json::parse(slurp(a.path() / "timing.json"));
  for (const auto& seed : timing["seeds"])
    for (const auto& [stage, secs] : seed["stage_seconds"].items()) EXPECT_GE(secs.get<double>(), 0.0);
}

TEST(Experiment, FailingStageIsMarkedAndEarlierArtifactsKept) {
  testutil::TempDir dir("failing");
  const Json cfg = {{"backbone", {{"steps", 1}, {"corpus_per_class", 1}}},
                    {"classifier", {{"epochs", 1}}},
                    {"cache_dir", "/proc/unidiff-cache"},
                    {"output_dir", dir.path().string()}};
  const RunReport r = run_experiment(cfg);
  ASSERT_EQ(r.seeds.size(), 1u);
  EXPECT_TRUE(r.failed);
  EXPECT_EQ(r.seeds[0].failed_stage, "finetune");
  EXPECT_FALSE(r.seeds[0].error.empty());
  EXPECT_TRUE(fs::exists(dir.path() / "seed-0" / "real" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir.path() / "report.json"));
}

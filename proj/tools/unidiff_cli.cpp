#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "unidiff/errors.hpp"
#include "unidiff/experiment.hpp"

namespace fs = std::filesystem;
using unidiff::Json;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON config file (defaults when omitted)");
  cmd->add_option("--set", c.overrides, "override a config key, e.g. --set generation.strength=0.5");
  cmd->add_flag("-q,--quiet", c.quiet, "no progress output");
}

Json build_config(const Common& c) {
  Json cfg = c.config.empty() ? unidiff::default_config() : unidiff::load_config(c.config);
  for (const auto& o : c.overrides) unidiff::apply_override(cfg, o);
  unidiff::validate_config(cfg);
  return cfg;
}

std::vector<Json> parse_values(const std::string& list) {
  std::vector<Json> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    Json v = Json::parse(item, nullptr, false);
    out.push_back(v.is_discarded() ? Json(item) : v);
  }
  return out;
}

unidiff::GridAxis parse_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw unidiff::ParameterError("axis must look like key=v1,v2,...");
  return {spec.substr(0, eq), parse_values(spec.substr(eq + 1))};
}

void print_summary(const unidiff::RunReport& r) {
  std::printf("config %s  top1 %.4f +- %.4f  top5 %.4f%s\n", r.config_hash.c_str(), r.top1_mean,
              r.top1_std, r.top5_mean, r.failed ? "  [FAILED]" : "");
  for (const auto& s : r.seeds) {
    if (!s.failed_stage.empty()) {
      std::printf("  seed %llu failed in %s: %s\n", static_cast<unsigned long long>(s.seed),
                  s.failed_stage.c_str(), s.error.c_str());
    }
  }
}

void write_grid_outputs(const unidiff::GridResult& g, const fs::path& dir) {
  unidiff::write_grid_csv(g, dir / "grid.csv");
  unidiff::emit_report(g.cells, unidiff::ReportFormat::plotdata, dir / "plotdata.csv");
  unidiff::emit_report(g.cells, unidiff::ReportFormat::json, dir / "reports.json");
  const auto& best = g.cells[g.best];
  std::printf("best cell %s  top1 %.4f\n", best.cell.dump().c_str(), best.top1_mean);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based data augmentation experiments on a procedural shape dataset"};
  app.require_subcommand(1);
  Common common;

  auto* finetune = app.add_subcommand("finetune", "fine-tune the backbone on the task and save checkpoints");
  auto* generate = app.add_subcommand("generate", "fine-tune (if enabled) and write synthetic manifests");
  auto* train = app.add_subcommand("train", "run through classifier training and test accuracy");
  auto* run = app.add_subcommand("run", "full pipeline including generative metrics");
  auto* evaluate = app.add_subcommand("evaluate", "FID and precision/recall of a synthetic manifest");
  auto* grid = app.add_subcommand("grid", "two-axis grid search");
  auto* sweep = app.add_subcommand("sweep", "real-data fraction x expansion ratio sweep");
  auto* report = app.add_subcommand("report", "convert report.json files to json/csv/plotdata");
  for (auto* cmd : {finetune, generate, train, run, evaluate, grid, sweep}) add_common(cmd, common);

  std::string synthetic_dir;
  evaluate->add_option("--synthetic", synthetic_dir, "synthetic manifest directory")->required();
  std::string rows_spec, cols_spec;
  grid->add_option("--rows", rows_spec, "row axis, key=v1,v2,...")->required();
  grid->add_option("--cols", cols_spec, "column axis, key=v1,v2,...")->required();
  std::string fractions = "0.2,0.4,1.0", ratios = "0,1,5";
  sweep->add_option("--fractions", fractions, "real-data fractions");
  sweep->add_option("--ratios", ratios, "expansion ratios (0 = no generation)");
  std::vector<std::string> inputs;
  std::string format = "csv", out_path;
  report->add_option("inputs", inputs, "report.json / reports.json files")->required();
  report->add_option("-f,--format", format, "json, csv or plotdata");
  report->add_option("-o,--out", out_path, "output file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    unidiff::RunOptions opt;
    if (!common.quiet) opt.log = &std::cerr;
    if (report->parsed()) {
      std::vector<unidiff::RunReport> reports;
      for (const auto& in : inputs) {
        std::ifstream f(in);
        if (!f) throw unidiff::IoError("cannot read " + in);
        const Json j = Json::parse(f);
        if (j.is_array()) {
          for (const auto& r : j) reports.push_back(unidiff::report_from_json(r));
        } else {
          reports.push_back(unidiff::report_from_json(j));
        }
      }
      unidiff::emit_report(reports, unidiff::report_format_from_string(format), out_path);
      return 0;
    }
    const Json cfg = build_config(common);
    if (evaluate->parsed()) {
      std::cout << unidiff::evaluate_synthetic(cfg, synthetic_dir).dump(1) << '\n';
      return 0;
    }
    const unidiff::Runner runner = [&](const Json& c) { return unidiff::run_experiment(c, opt); };
    const fs::path out_dir = cfg["output_dir"].get<std::string>();
    if (grid->parsed()) {
      write_grid_outputs(unidiff::grid_search(cfg, parse_axis(rows_spec), parse_axis(cols_spec), runner),
                         out_dir);
      return 0;
    }
    if (sweep->parsed()) {
      std::vector<double> f;
      std::vector<int> r;
      for (const auto& v : parse_values(fractions)) f.push_back(v.get<double>());
      for (const auto& v : parse_values(ratios)) r.push_back(v.get<int>());
      write_grid_outputs(unidiff::data_size_sweep(cfg, f, r, runner), out_dir);
      return 0;
    }
    opt.stop_after = finetune->parsed()   ? unidiff::StopAfter::finetune
                     : generate->parsed() ? unidiff::StopAfter::generate
                     : train->parsed()    ? unidiff::StopAfter::train
                                          : unidiff::StopAfter::evaluate;
    const auto r = unidiff::run_experiment(cfg, opt);
    print_summary(r);
    return r.failed ? 1 : 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "unidiff/checkpoint.hpp"
#include "unidiff/config.hpp"
#include "unidiff/data.hpp"

namespace unidiff {

struct SeedResult {
  std::uint64_t seed = 0;
  std::string failed_stage;  // empty when every stage succeeded
  std::string error;
  double top1 = 0.0;
  double top5 = 0.0;
  std::vector<double> per_class;
  std::optional<double> fid;
  bool fid_regularized = false;
  std::optional<double> precision;
  std::optional<double> recall;
  int knn_k = 0;
  int n_real = 0;
  int n_synthetic = 0;
  int n_filtered_out = 0;
  int fallbacks = 0;
  std::vector<double> concept_loss;
  std::vector<double> lora_loss;
  std::optional<double> lora_loss_before;
  std::optional<double> lora_loss_after;
  std::vector<std::string> notes;
  std::map<std::string, double> stage_seconds;  // finetune / generate / classify
};

struct RunReport {
  std::string config_hash;
  Json cell = Json::object();  // grid / sweep coordinates, empty for single runs
  std::vector<SeedResult> seeds;
  double top1_mean = 0.0;
  double top1_std = 0.0;
  double top5_mean = 0.0;
  double top5_std = 0.0;
  bool failed = false;
};

// Deterministic report body (no wall-clock values).
Json report_to_json(const RunReport& report);
RunReport report_from_json(const Json& j);
// Stage timings per seed.
Json timing_to_json(const RunReport& report);
// Fills mean/std/failed from the per-seed entries (std is the sample std, 0 for one seed).
void summarize(RunReport& report);

enum class StopAfter { finetune, generate, train, evaluate };

struct RunOptions {
  StopAfter stop_after = StopAfter::evaluate;
  bool write_artifacts = true;  // manifests, checkpoints and reports under output_dir
  std::ostream* log = nullptr;
};

// finetune -> generate -> filter -> compose / epoch views -> train -> evaluate -> metrics,
// for every seed. A failing stage marks the seed and keeps earlier artifacts.
RunReport run_experiment(const Json& config, const RunOptions& options = {});

// FID and precision/recall of a synthetic manifest against the task's test split.
Json evaluate_synthetic(const Json& config, const std::filesystem::path& synthetic_dir);

// Generator backbone for a config: trained on first use, then served from the
// in-process memo or the cache_dir checkpoint.
std::shared_ptr<const Checkpoint> backbone_checkpoint(const Json& config, std::ostream* log = nullptr);
// Full task dataset (coarse relabel applied, no k-shot / fraction subsetting).
DatasetManifest task_dataset_for(const Json& config);

using Runner = std::function<RunReport(const Json& config)>;

struct GridAxis {
  std::string key;  // dotted config key
  std::vector<Json> values;
};

struct GridResult {
  GridAxis rows;
  GridAxis cols;
  std::vector<RunReport> cells;  // row-major
  std::size_t best = 0;
};

// Cartesian product of two axes. Every cell config is validated before any
// run. Best cell = highest mean top-1, ties to the smaller row then column value.
GridResult grid_search(const Json& base, const GridAxis& rows, const GridAxis& cols,
                       const Runner& runner);
void write_grid_csv(const GridResult& grid, const std::filesystem::path& path);

// Real-data fraction x expansion ratio; ratio 0 disables generation.
GridResult data_size_sweep(const Json& base, const std::vector<double>& fractions,
                           const std::vector<int>& ratios, const Runner& runner);

enum class ReportFormat { json, csv, plotdata };
ReportFormat report_format_from_string(const std::string& s);

// json: array of report bodies; csv: one row per report; plotdata: x, series, y
// columns taken from the first two cell coordinates and mean top-1.
void emit_report(const std::vector<RunReport>& reports, ReportFormat format,
                 const std::filesystem::path& path);

}  // namespace unidiff

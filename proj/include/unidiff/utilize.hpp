#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unidiff/classify.hpp"
#include "unidiff/data.hpp"

namespace unidiff {

enum class Utilization { full_concat, full_replace, local_random_replace, global_random_replace };
enum class FilterScorer { base_prob, multi_score, binary_score };

std::string to_string(Utilization u);
Utilization utilization_from_string(const std::string& s);
std::string to_string(FilterScorer f);
FilterScorer filter_scorer_from_string(const std::string& s);

struct FilterSpec {
  FilterScorer scorer = FilterScorer::base_prob;
  double drop_fraction = 0.0;
  bool per_class = false;
};

struct UtilizationPlan {
  Utilization strategy = Utilization::full_concat;
  double p = 0.5;  // only for the random-replacement strategies
  std::optional<FilterSpec> filter;
};

void validate(const UtilizationPlan& plan);

// Real + synthetic (full_concat) or synthetic only (full_replace).
std::vector<LabeledSample> compose_static(std::span<const LabeledSample> real,
                                          std::span<const LabeledSample> synthetic,
                                          Utilization strategy);

std::uint64_t epoch_seed(std::uint64_t run_seed, int epoch);

// Per-epoch random replacement. Each position of the real set is swapped with
// probability p for a variant of its own source (local) or any pool member (global).
class EpochViewer {
 public:
  EpochViewer(std::span<const LabeledSample> real, std::span<const LabeledSample> synthetic,
              Utilization strategy, double p);

  std::vector<const LabeledSample*> view(std::uint64_t seed) const;

 private:
  std::span<const LabeledSample> real_;
  std::span<const LabeledSample> synthetic_;
  Utilization strategy_;
  double p_;
  std::vector<std::vector<std::size_t>> variants_;  // per real index (local)
};

std::vector<const LabeledSample*> epoch_view(std::span<const LabeledSample> real,
                                             std::span<const LabeledSample> synthetic,
                                             Utilization strategy, double p, std::uint64_t seed);

struct AuditEntry {
  std::string id;
  int label = 0;
  double score = 0.0;
};

struct FilterResult {
  std::vector<LabeledSample> kept;  // input order preserved
  std::vector<AuditEntry> dropped;  // ascending score
};

// Keeps ceil((1 - f) * N) samples (per class when per_class), ranked by score
// descending with ties to the smaller id.
FilterResult select_by_score(std::span<const LabeledSample> synthetic, std::span<const double> scores,
                             const FilterSpec& spec);

// Scores synthetic samples against their labels:
//   base_prob    p(y | x) under the scorer classifier
//   multi_score  softmax over classes of cosine similarity between the feature
//                of x and per-class prototypes from `reference`
//   binary_score p(y | x) - max p(y | b) over reference samples b not of class y
std::vector<double> score_synthetic(std::span<const LabeledSample> synthetic,
                                    const Classifier& scorer, FilterScorer kind,
                                    std::span<const LabeledSample> reference);

FilterResult filter_synthetic(std::span<const LabeledSample> synthetic, const Classifier& scorer,
                              const FilterSpec& spec, std::span<const LabeledSample> reference);

void write_filter_audit(const FilterResult& result, const FilterSpec& spec,
                        const std::filesystem::path& path);

}  // namespace unidiff

#include "unidiff/utilize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "unidiff/errors.hpp"

namespace unidiff {

using nn::Tensor;

namespace {

const std::pair<Utilization, const char*> kUtilNames[] = {
    {Utilization::full_concat, "full_concat"},
    {Utilization::full_replace, "full_replace"},
    {Utilization::local_random_replace, "local_random_replace"},
    {Utilization::global_random_replace, "global_random_replace"}};

const std::pair<FilterScorer, const char*> kScorerNames[] = {
    {FilterScorer::base_prob, "base_prob"},
    {FilterScorer::multi_score, "multi_score"},
    {FilterScorer::binary_score, "binary_score"}};

void check_sources(std::span<const LabeledSample> real, std::span<const LabeledSample> synthetic) {
  std::unordered_set<std::string> ids;
  for (const auto& s : real) ids.insert(s.id);
  for (const auto& s : synthetic) {
    if (!s.provenance.synthetic || s.provenance.source_ids.empty()) {
      throw ParameterError("sample " + s.id + " is not a synthetic sample with a source");
    }
    if (!ids.count(s.provenance.source_ids.front())) {
      throw ParameterError("synthetic sample " + s.id + " references unknown real id " +
                           s.provenance.source_ids.front());
    }
  }
}

}  // namespace

std::string to_string(Utilization u) {
  for (const auto& [k, v] : kUtilNames)
    if (k == u) return v;
  throw ParameterError("unknown utilization strategy");
}

Utilization utilization_from_string(const std::string& s) {
  for (const auto& [k, v] : kUtilNames)
    if (s == v) return k;
  throw ParameterError("unknown utilization strategy '" + s + "'");
}

std::string to_string(FilterScorer f) {
  for (const auto& [k, v] : kScorerNames)
    if (k == f) return v;
  throw ParameterError("unknown filter scorer");
}

FilterScorer filter_scorer_from_string(const std::string& s) {
  for (const auto& [k, v] : kScorerNames)
    if (s == v) return k;
  throw ParameterError("unknown filter scorer '" + s + "'");
}

void validate(const UtilizationPlan& plan) {
  if (!(plan.p >= 0.0 && plan.p <= 1.0)) throw ParameterError("replacement probability must lie in [0, 1]");
  if (plan.filter && !(plan.filter->drop_fraction >= 0.0 && plan.filter->drop_fraction < 1.0)) {
    throw ParameterError("filter drop fraction must lie in [0, 1)");
  }
}

std::vector<LabeledSample> compose_static(std::span<const LabeledSample> real,
                                          std::span<const LabeledSample> synthetic,
                                          Utilization strategy) {
  check_sources(real, synthetic);
  std::vector<LabeledSample> out;
  if (strategy == Utilization::full_concat) {
    out.assign(real.begin(), real.end());
    out.insert(out.end(), synthetic.begin(), synthetic.end());
  } else if (strategy == Utilization::full_replace) {
    if (synthetic.empty()) throw ParameterError("full_replace with an empty synthetic set");
    out.assign(synthetic.begin(), synthetic.end());
  } else {
    throw ParameterError("compose_static handles full_concat and full_replace only");
  }
  return out;
}

std::uint64_t epoch_seed(std::uint64_t run_seed, int epoch) {
  return derive_seed(run_seed, {0x65706f6368ULL, static_cast<std::uint64_t>(epoch)});
}

EpochViewer::EpochViewer(std::span<const LabeledSample> real,
                         std::span<const LabeledSample> synthetic, Utilization strategy, double p)
    : real_(real), synthetic_(synthetic), strategy_(strategy), p_(p) {
  if (strategy != Utilization::local_random_replace &&
      strategy != Utilization::global_random_replace) {
    throw ParameterError("epoch views need a random-replacement strategy");
  }
  if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("replacement probability must lie in [0, 1]");
  check_sources(real, synthetic);
  if (p == 0.0) return;
  if (strategy == Utilization::global_random_replace) {
    if (synthetic.empty()) throw ParameterError("global replacement with an empty synthetic pool");
    return;
  }
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < real.size(); ++i) index[real[i].id] = i;
  variants_.resize(real.size());
  for (std::size_t k = 0; k < synthetic.size(); ++k) {
    variants_[index.at(synthetic[k].provenance.source_ids.front())].push_back(k);
  }
  std::string missing;
  for (std::size_t i = 0; i < real.size(); ++i) {
    if (variants_[i].empty()) missing += (missing.empty() ? "" : ", ") + real[i].id;
  }
  if (!missing.empty()) throw ParameterError("no synthetic variants for: " + missing);
}

std::vector<const LabeledSample*> EpochViewer::view(std::uint64_t seed) const {
  Rng rng(seed);
  std::vector<const LabeledSample*> out;
  out.reserve(real_.size());
  for (std::size_t i = 0; i < real_.size(); ++i) {
    if (p_ > 0.0 && rng.bernoulli(p_)) {
      if (strategy_ == Utilization::local_random_replace) {
        const auto& v = variants_[i];
        out.push_back(&synthetic_[v[rng.index(v.size())]]);
      } else {
        out.push_back(&synthetic_[rng.index(synthetic_.size())]);
      }
    } else {
      out.push_back(&real_[i]);
    }
  }
  return out;
}

std::vector<const LabeledSample*> epoch_view(std::span<const LabeledSample> real,
                                             std::span<const LabeledSample> synthetic,
                                             Utilization strategy, double p, std::uint64_t seed) {
  return EpochViewer(real, synthetic, strategy, p).view(seed);
}

FilterResult select_by_score(std::span<const LabeledSample> synthetic, std::span<const double> scores,
                             const FilterSpec& spec) {
  if (!(spec.drop_fraction >= 0.0 && spec.drop_fraction < 1.0)) {
    throw ParameterError("filter drop fraction must lie in [0, 1); 1 would drop everything");
  }
  if (scores.size() != synthetic.size()) throw ShapeError("one score per synthetic sample required");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError("non-finite filter score");

  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < synthetic.size(); ++i) {
    groups[spec.per_class ? synthetic[i].fine : 0].push_back(i);
  }
  std::vector<char> keep(synthetic.size(), 1);
  FilterResult result;
  for (auto& [label, idx] : groups) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return synthetic[a].id < synthetic[b].id;
    });
    const auto n = static_cast<double>(idx.size());
    const auto kept = static_cast<std::size_t>(std::ceil((1.0 - spec.drop_fraction) * n - 1e-9));
    for (std::size_t r = kept; r < idx.size(); ++r) {
      keep[idx[r]] = 0;
      result.dropped.push_back({synthetic[idx[r]].id, synthetic[idx[r]].fine, scores[idx[r]]});
    }
  }
  for (std::size_t i = 0; i < synthetic.size(); ++i)
    if (keep[i]) result.kept.push_back(synthetic[i]);
  std::sort(result.dropped.begin(), result.dropped.end(), [](const auto& a, const auto& b) {
    return a.score != b.score ? a.score < b.score : a.id > b.id;
  });
  return result;
}

std::vector<double> score_synthetic(std::span<const LabeledSample> synthetic,
                                    const Classifier& scorer, FilterScorer kind,
                                    std::span<const LabeledSample> reference) {
  const std::size_t c = scorer.num_classes();
  for (const auto& s : synthetic) {
    if (s.fine < 0 || static_cast<std::size_t>(s.fine) >= c) {
      throw ParameterError("scorer does not cover class " + std::to_string(s.fine));
    }
  }
  std::vector<double> scores(synthetic.size());
  if (synthetic.empty()) return scores;
  const Tensor x = stack_images(synthetic);

  if (kind == FilterScorer::base_prob || kind == FilterScorer::binary_score) {
    const Tensor p = scorer.probabilities(x);
    for (std::size_t i = 0; i < synthetic.size(); ++i) {
      scores[i] = p[i * c + static_cast<std::size_t>(synthetic[i].fine)];
    }
    if (kind == FilterScorer::binary_score) {
      if (reference.empty()) throw ParameterError("binary_score needs a calibration set");
      const Tensor pr = scorer.probabilities(stack_images(reference));
      std::vector<double> floor(c, 0.0);
      for (std::size_t i = 0; i < reference.size(); ++i)
        for (std::size_t j = 0; j < c; ++j)
          if (static_cast<int>(j) != reference[i].fine) floor[j] = std::max(floor[j], pr[i * c + j]);
      for (std::size_t i = 0; i < synthetic.size(); ++i) {
        scores[i] -= floor[static_cast<std::size_t>(synthetic[i].fine)];
      }
    }
    return scores;
  }

  // multi_score: cosine similarity to class prototypes, softmax with temperature 0.1.
  if (reference.empty()) throw ParameterError("multi_score needs reference samples for prototypes");
  const Tensor fr = scorer.features(stack_images(reference));
  const std::size_t d = fr.cols();
  std::vector<double> proto(c * d, 0.0);
  std::vector<int> count(c, 0);
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const auto y = static_cast<std::size_t>(reference[i].fine);
    if (y >= c) throw ParameterError("reference label outside scorer classes");
    ++count[y];
    for (std::size_t k = 0; k < d; ++k) proto[y * d + k] += fr[i * d + k];
  }
  for (std::size_t y = 0; y < c; ++y) {
    if (count[y] == 0) throw ParameterError("no reference samples for class " + std::to_string(y));
  }
  auto norm = [&](const double* v) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += v[k] * v[k];
    return std::sqrt(s) + 1e-12;
  };
  const Tensor fs = scorer.features(x);
  std::vector<double> logits(c);
  for (std::size_t i = 0; i < synthetic.size(); ++i) {
    const double* f = fs.data() + i * d;
    const double nf = norm(f);
    for (std::size_t y = 0; y < c; ++y) {
      const double* pv = proto.data() + y * d;
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += f[k] * pv[k];
      logits[y] = 10.0 * dot / (nf * norm(pv));
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    scores[i] = std::exp(logits[static_cast<std::size_t>(synthetic[i].fine)] - mx) / z;
  }
  return scores;
}

FilterResult filter_synthetic(std::span<const LabeledSample> synthetic, const Classifier& scorer,
                              const FilterSpec& spec, std::span<const LabeledSample> reference) {
  if (!(spec.drop_fraction >= 0.0 && spec.drop_fraction < 1.0)) {
    throw ParameterError("filter drop fraction must lie in [0, 1); 1 would drop everything");
  }
  const auto scores = score_synthetic(synthetic, scorer, spec.scorer, reference);
  return select_by_score(synthetic, scores, spec);
}

void write_filter_audit(const FilterResult& result, const FilterSpec& spec,
                        const std::filesystem::path& path) {
  nlohmann::json dropped = nlohmann::json::array();
  for (const auto& e : result.dropped) {
    dropped.push_back({{"id", e.id}, {"label", e.label}, {"score", e.score}});
  }
  nlohmann::json j{{"format_version", 1},
                   {"scorer", to_string(spec.scorer)},
                   {"drop_fraction", spec.drop_fraction},
                   {"per_class", spec.per_class},
                   {"kept", result.kept.size()},
                   {"dropped", dropped}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write filter audit " + path.string());
  out << j.dump(1) << '\n';
}

}  // namespace unidiff

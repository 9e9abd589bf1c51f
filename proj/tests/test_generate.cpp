#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "test_util.hpp"
#include "trained_model.hpp"
#include "unidiff/classify.hpp"
#include "unidiff/data.hpp"
#include "unidiff/errors.hpp"
#include "unidiff/generate.hpp"

using namespace unidiff;
using nn::Tensor;
using testutil::coarse_rig;
using testutil::fine_rig;

namespace {

ShapeSpec tiny_spec() {
  ShapeSpec s;
  s.families = 2;
  s.variants = 2;
  s.train_per_class = 3;
  s.test_per_class = 1;
  s.image_size = 8;
  return s;
}

// Analytic setup: every sample is denoised toward one fixed datum.
struct OracleRig {
  DatasetManifest data = generate_shapes(tiny_spec(), 4);
  NoiseSchedule schedule = make_default_schedule(25);
  SingleDatumPredictor predictor;
  GenerationContext ctx;

  explicit OracleRig(std::size_t datum_index = 0)
      : predictor(to_model_space(data.train[datum_index].image), schedule) {
    ctx.predictor = &predictor;
    ctx.schedule = &schedule;
    ctx.hierarchy = &data.hierarchy;
    ctx.tokens = data.hierarchy.fine_names;
    set_default_vocabulary(ctx, data.train);
  }
};

double mean_abs(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double l2(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// log p(y | x) = -||x - target_y||^2: a concave toy score.
class QuadraticScorer final : public DifferentiableScorer {
 public:
  explicit QuadraticScorer(Tensor target) : target_(std::move(target)) {}
  nn::Var log_prob(nn::Graph& g, nn::Var x, int) const override {
    nn::Var d = x - g.constant(target_);
    return nn::scale(nn::sum(d * d), -1.0);
  }

 private:
  Tensor target_;
};

class NanScorer final : public DifferentiableScorer {
 public:
  nn::Var log_prob(nn::Graph&, nn::Var x, int) const override {
    return nn::scale(nn::sum(x), std::numeric_limits<double>::quiet_NaN());
  }
};

DatasetManifest as_manifest(const DatasetManifest& like, std::vector<LabeledSample> train) {
  DatasetManifest m;
  m.hierarchy = like.hierarchy;
  m.train = std::move(train);
  return m;
}

}  // namespace

TEST(GenerationSpec, Validation) {
  GenerationSpec s;
  EXPECT_NO_THROW(validate(s));
  s.strength = 0.0;
  EXPECT_THROW(validate(s), ParameterError);
  s = GenerationSpec{};
  s.ratio = 0;
  EXPECT_THROW(validate(s), ParameterError);
  s = GenerationSpec{};
  s.two_stage_r = 0.5;
  EXPECT_THROW(validate(s), ParameterError);
  s.strategy = Strategy::invert_interpolate;
  EXPECT_NO_THROW(validate(s));
  s = GenerationSpec{};
  s.fractal_gamma = 1.0;
  EXPECT_THROW(validate(s), ParameterError);
  s = GenerationSpec{};
  s.lambda = 1.5;
  EXPECT_THROW(validate(s), ParameterError);
  EXPECT_EQ(strategy_from_string(to_string(Strategy::stylemix_composite)), Strategy::stylemix_composite);
  EXPECT_THROW(strategy_from_string("cutout"), ParameterError);
  EXPECT_EQ(suffix_policy_from_string("exchange"), SuffixPolicy::exchange);
}

TEST(Sdedit, SmallestStrengthWithOracleReturnsSource) {
  OracleRig rig;
  const auto& src = rig.data.train[0];
  GenerationSpec spec;
  spec.strength = 1e-3;
  const auto out = sdedit_generate(rig.ctx, src, spec, 3);
  EXPECT_LT(nn::max_abs_diff(out.image, src.image), 1e-6);
  EXPECT_EQ(out.fine, src.fine);
  EXPECT_EQ(out.coarse, src.coarse);
  EXPECT_TRUE(out.provenance.synthetic);
  EXPECT_EQ(out.provenance.method, "sdedit");
  EXPECT_EQ(out.provenance.source_ids, std::vector<std::string>{src.id});
  EXPECT_EQ(out.provenance.strength, 1e-3);
  EXPECT_EQ(out.provenance.seed, 3u);
  EXPECT_EQ(out.provenance.extra.at("t_start"), "1");
}

TEST(Sdedit, UnknownClassIsRejected) {
  OracleRig rig;
  rig.ctx.tokens.resize(1);
  GenerationSpec spec;
  EXPECT_THROW(sdedit_generate(rig.ctx, rig.data.train.back(), spec, 1), ParameterError);
}

TEST(Sdedit, DeterministicPerSeed) {
  const auto& rig = fine_rig();
  GenerationSpec spec;
  const auto& src = rig.data.train[5];
  const auto a = sdedit_generate(rig.ctx, src, spec, 11);
  const auto b = sdedit_generate(rig.ctx, src, spec, 11);
  const auto c = sdedit_generate(rig.ctx, src, spec, 12);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.image, c.image);
}

TEST(Sdedit, DeviationGrowsWithStrength) {
  const auto& rig = fine_rig();
  const std::size_t n = 200;
  std::vector<double> mean_dist;
  for (double s : {0.9, 0.5, 0.1}) {
    GenerationSpec spec;
    spec.strength = s;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& src = rig.data.train[i];
      total += l2(sdedit_generate(rig.ctx, src, spec, 100 + i).image, src.image);
    }
    mean_dist.push_back(total / n);
  }
  EXPECT_GT(mean_dist[0], mean_dist[1]);
  EXPECT_GT(mean_dist[1], mean_dist[2]);
}

TEST(Sdedit, SuffixPoliciesDrawFromTheirVocabularies) {
  const auto& rig = fine_rig();
  GenerationSpec spec;
  spec.strength = 0.1;
  std::set<std::string> annotations(kBackgroundSuffixes.begin(), kBackgroundSuffixes.end());
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& src = rig.data.train[i];
    spec.suffix_policy = SuffixPolicy::dream;
    const std::string dream = sdedit_generate(rig.ctx, src, spec, i).provenance.extra.at("suffix");
    EXPECT_TRUE(std::find(kToneSuffixes.begin(), kToneSuffixes.end(), dream) != kToneSuffixes.end());
    EXPECT_EQ(annotations.count(dream), 0u);
    spec.suffix_policy = SuffixPolicy::exchange;
    const std::string ex = sdedit_generate(rig.ctx, src, spec, i).provenance.extra.at("suffix");
    bool seen_elsewhere = false;
    for (const auto& other : rig.data.train)
      if (other.id != src.id && other.annotation == ex) seen_elsewhere = true;
    EXPECT_TRUE(seen_elsewhere) << ex;
    spec.suffix_policy = SuffixPolicy::none;
    EXPECT_EQ(sdedit_generate(rig.ctx, src, spec, i).provenance.extra.at("suffix"), "");
  }
}

TEST(LatentOptimized, ZeroStepsMatchesSdedit) {
  const auto& rig = fine_rig();
  GenerationSpec spec;
  spec.opt_steps = 0;
  QuadraticScorer scorer(Tensor({1, rig.ctx.model->arch().image_dim}));
  const auto& src = rig.data.train[7];
  const auto opt = latent_optimized_sdedit(rig.ctx, src, spec, scorer, 21);
  const auto plain = sdedit_generate(rig.ctx, src, spec, 21);
  EXPECT_EQ(opt.image, plain.image);
  EXPECT_EQ(opt.provenance.extra.at("opt_steps"), "0");
  EXPECT_EQ(opt.provenance.method, "latent_optimized_sdedit");
  EXPECT_EQ(opt.fine, src.fine);
}

TEST(LatentOptimized, ObjectiveNonDecreasingOnConcaveScore) {
  const auto& rig = fine_rig();
  const auto& src = rig.data.train[3];
  const auto& other = rig.data.train[200];
  QuadraticScorer scorer(to_model_space(other.image).reshaped({1, other.image.size()}));
  GenerationSpec spec;
  spec.w_div = 0.0;
  spec.strength = 0.5;
  double prev = -std::numeric_limits<double>::infinity();
  for (int k = 1; k <= 6; ++k) {
    spec.opt_steps = k;
    const auto out = latent_optimized_sdedit(rig.ctx, src, spec, scorer, 5);
    const double value = std::stod(out.provenance.extra.at("objective"));
    EXPECT_GE(value, prev) << "k=" << k;
    EXPECT_EQ(out.provenance.extra.at("opt_steps"), std::to_string(k));
    prev = value;
  }
  spec.opt_steps = 0;
  const double start = std::stod(latent_optimized_sdedit(rig.ctx, src, spec, scorer, 5)
                                     .provenance.extra.at("objective"));
  EXPECT_EQ(start, 0.0);  // not evaluated without steps
}

TEST(LatentOptimized, NonFiniteObjectiveIsNumericError) {
  const auto& rig = fine_rig();
  GenerationSpec spec;
  spec.opt_steps = 2;
  NanScorer scorer;
  EXPECT_THROW(latent_optimized_sdedit(rig.ctx, rig.data.train[0], spec, scorer, 1), NumericError);
  GenerationContext no_model = rig.ctx;
  no_model.model = nullptr;
  QuadraticScorer q(Tensor({1, rig.ctx.model->arch().image_dim}));
  EXPECT_THROW(latent_optimized_sdedit(no_model, rig.data.train[0], spec, q, 1), ParameterError);
}

TEST(InterclassMix, LabelsTargetAndRejectsSameClass) {
  OracleRig rig;
  const auto& src = rig.data.train[0];
  GenerationSpec spec;
  EXPECT_THROW(interclass_mix(rig.ctx, src, src.fine, spec, 1), ParameterError);
  const int target = (src.fine + 3) % 4;
  spec.strength = 1e-3;
  const auto out = interclass_mix(rig.ctx, src, target, spec, 1);
  EXPECT_EQ(out.fine, target);
  EXPECT_EQ(out.coarse, rig.data.hierarchy.fine_to_coarse[static_cast<std::size_t>(target)]);
  EXPECT_EQ(out.provenance.extra.at("source_class"), std::to_string(src.fine));
  EXPECT_EQ(out.provenance.extra.at("target_class"), std::to_string(target));
  EXPECT_EQ(out.provenance.source_ids, std::vector<std::string>{src.id});
  // Near-zero strength keeps the source image under the new label.
  EXPECT_LT(nn::max_abs_diff(out.image, src.image), 1e-6);
}

TEST(InterclassMix, OracleClassifierPrefersTarget) {
  const auto& rig = coarse_rig();
  // Oracle: a family classifier trained on a separate, larger sample.
  ShapeSpec big;
  big.train_per_class = 60;
  big.test_per_class = 1;
  const auto oracle_data = relabel_to_coarse(generate_shapes(big, 77));
  ClassifierConfig cc;
  cc.size = ClassifierSize::large;
  cc.epochs = 20;
  cc.seed = 3;
  const auto oracle = train_classifier(oracle_data.train, 4, cc).model;

  GenerationSpec spec;
  spec.strength = 0.9;
  const std::size_t n = 200;
  int wins = 0;
  Rng rng(8);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& src = rig.data.train[i];
    int target = static_cast<int>(rng.index(3));
    if (target >= src.fine) ++target;
    const auto out = interclass_mix(rig.ctx, src, target, spec, 500 + i);
    const std::vector<LabeledSample> one{out};
    const Tensor p = oracle.probabilities(stack_images(one));
    if (p[static_cast<std::size_t>(target)] > p[static_cast<std::size_t>(src.fine)]) ++wins;
  }
  const double rate = static_cast<double>(wins) / n;
  RecordProperty("target_preferred_rate", std::to_string(rate));
  EXPECT_GE(rate, 0.70) << "rate " << rate;
}

TEST(InvertInterpolate, RejectsMismatchedOrIdenticalPair) {
  OracleRig rig;
  GenerationSpec spec;
  spec.strategy = Strategy::invert_interpolate;
  const auto& a = rig.data.train[0];
  const auto& other_class = rig.data.train[3];
  ASSERT_NE(a.fine, other_class.fine);
  EXPECT_THROW(invert_interpolate(rig.ctx, a, other_class, spec, 1), ParameterError);
  EXPECT_THROW(invert_interpolate(rig.ctx, a, a, spec, 1), ParameterError);
}

TEST(InvertInterpolate, EndpointsReconstructAndMidpointIsNovel) {
  const auto& rig = fine_rig();
  GenerationSpec spec;
  spec.strategy = Strategy::invert_interpolate;
  spec.sampler.guidance_w = 1.0;
  spec.two_stage_r = 0.0;
  const int pairs = 10;
  double err_a = 0.0, err_b = 0.0;
  double novelty = std::numeric_limits<double>::infinity();
  for (int k = 0; k < pairs; ++k) {
    const auto& a = rig.data.train[static_cast<std::size_t>(20 * k)];
    const auto& b = rig.data.train[static_cast<std::size_t>(20 * k + 1)];
    ASSERT_EQ(a.fine, b.fine);
    const Tensor xa = to_model_space(a.image), xb = to_model_space(b.image);
    spec.lambda = 0.0;
    err_a += mean_abs(to_model_space(invert_interpolate(rig.ctx, a, b, spec, 1).image), xa);
    spec.lambda = 1.0;
    err_b += mean_abs(to_model_space(invert_interpolate(rig.ctx, a, b, spec, 1).image), xb);
    spec.lambda = 0.5;
    const auto mid = invert_interpolate(rig.ctx, a, b, spec, 1);
    EXPECT_EQ(mid.provenance.source_ids, (std::vector<std::string>{a.id, b.id}));
    EXPECT_EQ(mid.fine, a.fine);
    const Tensor xm = to_model_space(mid.image);
    novelty = std::min({novelty, mean_abs(xm, xa), mean_abs(xm, xb)});
  }
  EXPECT_LT(err_a / pairs, testutil::kInversionRoundTripBound);
  EXPECT_LT(err_b / pairs, testutil::kInversionRoundTripBound);
  EXPECT_GT(novelty, testutil::kInversionRoundTripBound);
}

TEST(Stylemix, MaskAlgebraAndIdentity) {
  OracleRig rig;
  const auto& src = rig.data.train[1];
  GenerationSpec spec;
  spec.strategy = Strategy::stylemix_composite;
  spec.fractal_gamma = 0.0;
  spec.mask = MaskChoice{true, true};
  const StyleTransform flat = [](const LabeledSample& s, const std::string&) {
    return Tensor(s.image.shape(), 0.25);
  };
  const auto out = stylemix_composite(rig.ctx, src, kToneSuffixes[0], spec, 4, flat);
  const std::size_t h = src.image.dim(0), w = src.image.dim(1), ch = src.image.dim(2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t i = (y * w + x) * ch + c;
        EXPECT_EQ(out.image[i], 2 * x < w ? src.image[i] : 0.25);
      }
  spec.mask = MaskChoice{false, false};
  const auto bottom = stylemix_composite(rig.ctx, src, kToneSuffixes[0], spec, 4, flat);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      EXPECT_EQ(bottom.image[(y * w + x) * ch], 2 * y < h ? 0.25 : src.image[(y * w + x) * ch]);

  spec.mask.reset();
  const StyleTransform identity = [](const LabeledSample& s, const std::string&) { return s.image; };
  EXPECT_EQ(stylemix_composite(rig.ctx, src, kToneSuffixes[1], spec, 9, identity).image, src.image);
}

TEST(Stylemix, OutputStaysInRangeAndLabelInherited) {
  OracleRig rig;
  const StyleTransform noisy = [](const LabeledSample& s, const std::string&) {
    Rng r(1);
    Tensor t(s.image.shape());
    for (double& v : t.storage()) v = r.uniform(0.0, 1.0);
    return t;
  };
  GenerationSpec spec;
  spec.strategy = Strategy::stylemix_composite;
  for (double gamma : {0.0, 0.2, 0.7, 0.999}) {
    spec.fractal_gamma = gamma;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto out = stylemix_composite(rig.ctx, rig.data.train[seed], kToneSuffixes[2], spec, seed, noisy);
      for (double v : out.image.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
      EXPECT_EQ(out.fine, rig.data.train[seed].fine);
      EXPECT_EQ(out.provenance.extra.at("style"), kToneSuffixes[2]);
    }
  }
  EXPECT_THROW(stylemix_composite(rig.ctx, rig.data.train[0], "sparkles", spec, 1, noisy), ParameterError);
}

TEST(Stylemix, DefaultTransformUsesStyledSdedit) {
  const auto& rig = fine_rig();
  GenerationSpec spec;
  spec.strategy = Strategy::stylemix_composite;
  const auto& src = rig.data.train[9];
  const auto a = stylemix_composite(rig.ctx, src, kToneSuffixes[0], spec, 2);
  EXPECT_EQ(a, stylemix_composite(rig.ctx, src, kToneSuffixes[0], spec, 2));
  EXPECT_NE(a.image, src.image);
  EXPECT_EQ(a.fine, src.fine);
}

TEST(FractalTexture, RangeAndDeterminism) {
  Rng a(3), b(3);
  const Tensor t = fractal_texture({16, 16, 3}, a);
  EXPECT_EQ(t, fractal_texture({16, 16, 3}, b));
  double lo = 1.0, hi = 0.0;
  for (double v : t.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_EQ(lo, 0.0);
  EXPECT_EQ(hi, 1.0);
  EXPECT_THROW(fractal_texture({16, 16}, a), ShapeError);
}

TEST(Augment, CountsIdsAndDeterminism) {
  const auto data = generate_shapes(ShapeSpec{}, 2);
  const NoiseSchedule schedule = make_default_schedule(25);
  SingleDatumPredictor predictor(to_model_space(data.train[0].image), schedule);
  GenerationContext ctx;
  ctx.predictor = &predictor;
  ctx.schedule = &schedule;
  ctx.hierarchy = &data.hierarchy;
  ctx.tokens = data.hierarchy.fine_names;
  GenerationSpec spec;
  spec.ratio = 5;
  spec.seed = 42;
  spec.sampler.steps = 5;
  const auto r = augment_dataset(ctx, data.train, spec);
  ASSERT_EQ(r.synthetic.size(), 1200u);
  std::set<std::string> ids;
  for (const auto& s : data.train) ids.insert(s.id);
  for (std::size_t k = 0; k < r.synthetic.size(); ++k) {
    const auto& s = r.synthetic[k];
    EXPECT_TRUE(ids.insert(s.id).second) << s.id;
    EXPECT_EQ(s.provenance.source_ids.front(), data.train[k / 5].id);
    EXPECT_EQ(s.provenance.seed, variant_seed(42, data.train[k / 5].id, static_cast<int>(k % 5)));
  }
  EXPECT_GE(r.seconds, 0.0);
  const auto again = augment_dataset(ctx, data.train, spec);
  EXPECT_EQ(manifest_hash(as_manifest(data, again.synthetic)), manifest_hash(as_manifest(data, r.synthetic)));
  spec.seed = 43;
  EXPECT_NE(manifest_hash(as_manifest(data, augment_dataset(ctx, data.train, spec).synthetic)),
            manifest_hash(as_manifest(data, r.synthetic)));
}

TEST(Augment, ParallelMatchesSerialOnTrainedModel) {
  const auto& rig = fine_rig();
  const std::vector<LabeledSample> real(rig.data.train.begin(), rig.data.train.begin() + 24);
  for (Strategy strategy : {Strategy::sdedit, Strategy::interclass_mix, Strategy::invert_interpolate,
                            Strategy::stylemix_composite}) {
    GenerationSpec spec;
    spec.strategy = strategy;
    spec.ratio = 2;
    spec.seed = 5;
    spec.sampler.steps = 5;
    const auto par = augment_dataset(rig.ctx, real, spec, nullptr, true);
    const auto ser = augment_dataset(rig.ctx, real, spec, nullptr, false);
    EXPECT_EQ(manifest_hash(as_manifest(rig.data, par.synthetic)),
              manifest_hash(as_manifest(rig.data, ser.synthetic)))
        << to_string(strategy);
  }
}

TEST(Augment, ProvenanceRegeneratesVariant) {
  const auto& rig = fine_rig();
  const std::vector<LabeledSample> real(rig.data.train.begin(), rig.data.train.begin() + 4);
  GenerationSpec spec;
  spec.ratio = 2;
  spec.seed = 17;
  spec.suffix_policy = SuffixPolicy::pool;
  const auto r = augment_dataset(rig.ctx, real, spec);
  for (std::size_t k = 0; k < r.synthetic.size(); ++k) {
    const auto& s = r.synthetic[k];
    GenerationSpec again = spec;
    again.strength = s.provenance.strength;
    const auto redo = sdedit_generate(rig.ctx, real[k / 2], again, s.provenance.seed);
    EXPECT_EQ(redo.image, s.image);
    EXPECT_EQ(redo.provenance.extra.at("suffix"), s.provenance.extra.at("suffix"));
  }
}

TEST(Augment, MissingPartnerFallsBackToSdedit) {
  OracleRig rig;
  ShapeSpec spec_counts = tiny_spec();
  spec_counts.train_counts = {2, 1, 2, 2};
  const auto data = generate_shapes(spec_counts, 6);
  rig.ctx.hierarchy = &data.hierarchy;
  GenerationSpec spec;
  spec.strategy = Strategy::invert_interpolate;
  spec.ratio = 2;
  spec.sampler.steps = 5;
  const auto r = augment_dataset(rig.ctx, data.train, spec);
  EXPECT_EQ(r.synthetic.size(), 14u);
  EXPECT_EQ(r.fallbacks, 2);
  for (const auto& s : r.synthetic) {
    if (s.fine == 1) {
      EXPECT_EQ(s.provenance.method, "sdedit");
      EXPECT_TRUE(s.provenance.extra.count("fallback"));
    } else {
      EXPECT_EQ(s.provenance.method, "invert_interpolate");
      EXPECT_EQ(s.provenance.source_ids.size(), 2u);
    }
  }
}

TEST(Augment, RejectsSyntheticOrDuplicateInput) {
  OracleRig rig;
  GenerationSpec spec;
  std::vector<LabeledSample> dup{rig.data.train[0], rig.data.train[0]};
  EXPECT_THROW(augment_dataset(rig.ctx, dup, spec), ParameterError);
  std::vector<LabeledSample> syn{rig.data.train[0]};
  syn[0].provenance.synthetic = true;
  EXPECT_THROW(augment_dataset(rig.ctx, syn, spec), ParameterError);
}

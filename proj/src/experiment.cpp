#include "unidiff/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <mutex>
#include <set>

#include "unidiff/checkpoint.hpp"
#include "unidiff/classify.hpp"
#include "unidiff/data.hpp"
#include "unidiff/diffusion.hpp"
#include "unidiff/errors.hpp"
#include "unidiff/finetune.hpp"
#include "unidiff/generate.hpp"
#include "unidiff/metrics.hpp"
#include "unidiff/utilize.hpp"

namespace unidiff {

namespace fs = std::filesystem;
using nn::Tensor;

// ---------------------------------------------------------------- reports

namespace {

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

std::optional<double> optional_from(const Json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

}  // namespace

Json report_to_json(const RunReport& r) {
  Json seeds = Json::array();
  for (const auto& s : r.seeds) {
    seeds.push_back({{"seed", s.seed},
                     {"failed_stage", s.failed_stage.empty() ? Json(nullptr) : Json(s.failed_stage)},
                     {"error", s.error},
                     {"top1", s.top1},
                     {"top5", s.top5},
                     {"per_class", s.per_class},
                     {"fid", optional_json(s.fid)},
                     {"fid_regularized", s.fid_regularized},
                     {"precision", optional_json(s.precision)},
                     {"recall", optional_json(s.recall)},
                     {"knn_k", s.knn_k},
                     {"n_real", s.n_real},
                     {"n_synthetic", s.n_synthetic},
                     {"n_filtered_out", s.n_filtered_out},
                     {"fallbacks", s.fallbacks},
                     {"concept_loss", s.concept_loss},
                     {"lora_loss", s.lora_loss},
                     {"lora_loss_before", optional_json(s.lora_loss_before)},
                     {"lora_loss_after", optional_json(s.lora_loss_after)},
                     {"notes", s.notes}});
  }
  return Json{{"format_version", 1},
              {"config_hash", r.config_hash},
              {"cell", r.cell},
              {"seeds", seeds},
              {"top1_mean", r.top1_mean},
              {"top1_std", r.top1_std},
              {"top5_mean", r.top5_mean},
              {"top5_std", r.top5_std},
              {"failed", r.failed}};
}

RunReport report_from_json(const Json& j) {
  try {
    if (j.at("format_version") != 1) throw FormatError("unsupported report format_version");
    RunReport r;
    r.config_hash = j.at("config_hash");
    r.cell = j.at("cell");
    for (const auto& e : j.at("seeds")) {
      SeedResult s;
      s.seed = e.at("seed");
      s.failed_stage = e.at("failed_stage").is_null() ? "" : e.at("failed_stage").get<std::string>();
      s.error = e.at("error");
      s.top1 = e.at("top1");
      s.top5 = e.at("top5");
      s.per_class = e.at("per_class").get<std::vector<double>>();
      s.fid = optional_from(e.at("fid"));
      s.fid_regularized = e.at("fid_regularized");
      s.precision = optional_from(e.at("precision"));
      s.recall = optional_from(e.at("recall"));
      s.knn_k = e.at("knn_k");
      s.n_real = e.at("n_real");
      s.n_synthetic = e.at("n_synthetic");
      s.n_filtered_out = e.at("n_filtered_out");
      s.fallbacks = e.at("fallbacks");
      s.concept_loss = e.at("concept_loss").get<std::vector<double>>();
      s.lora_loss = e.at("lora_loss").get<std::vector<double>>();
      s.lora_loss_before = optional_from(e.at("lora_loss_before"));
      s.lora_loss_after = optional_from(e.at("lora_loss_after"));
      s.notes = e.at("notes").get<std::vector<std::string>>();
      r.seeds.push_back(std::move(s));
    }
    r.top1_mean = j.at("top1_mean");
    r.top1_std = j.at("top1_std");
    r.top5_mean = j.at("top5_mean");
    r.top5_std = j.at("top5_std");
    r.failed = j.at("failed");
    return r;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

Json timing_to_json(const RunReport& r) {
  Json seeds = Json::array();
  for (const auto& s : r.seeds) seeds.push_back({{"seed", s.seed}, {"stage_seconds", s.stage_seconds}});
  return Json{{"format_version", 1}, {"config_hash", r.config_hash}, {"seeds", seeds}};
}

void summarize(RunReport& r) {
  r.failed = false;
  std::vector<double> t1, t5;
  for (const auto& s : r.seeds) {
    if (!s.failed_stage.empty()) {
      r.failed = true;
      continue;
    }
    t1.push_back(s.top1);
    t5.push_back(s.top5);
  }
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = sd = 0.0;
    if (v.empty()) return;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    if (v.size() < 2) return;
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
  };
  stats(t1, r.top1_mean, r.top1_std);
  stats(t5, r.top5_mean, r.top5_std);
}

// ---------------------------------------------------------------- pipeline

namespace {

ShapeSpec shape_spec(const Json& d) {
  ShapeSpec s;
  s.families = d["families"];
  s.variants = d["variants"];
  s.train_per_class = d["train_per_class"];
  s.test_per_class = d["test_per_class"];
  s.image_size = d["image_size"];
  s.noise = d["noise"];
  const std::string bg = d["background"];
  s.background = bg == "plain" ? BackgroundMode::plain
                               : bg == "cluttered" ? BackgroundMode::cluttered : BackgroundMode::mixed;
  s.hue_step = d["hue_step"];
  s.stripe_amplitude = d["stripe_amplitude"];
  return s;
}

// Rendering fields shared by the target data and the backbone corpus.
Json render_fields(const Json& d) {
  return Json{{"variants", d["variants"]},       {"image_size", d["image_size"]},
              {"noise", d["noise"]},             {"background", d["background"]},
              {"hue_step", d["hue_step"]},       {"stripe_amplitude", d["stripe_amplitude"]}};
}

// Process-wide memo of artifacts shared between runs (datasets, backbones,
// reference classifiers); the disk cache backs the expensive ones.
struct Workspace {
  std::mutex mu;
  std::map<std::string, std::shared_ptr<const DatasetManifest>> datasets;
  std::map<std::string, std::shared_ptr<const Checkpoint>> backbones;
  std::map<std::string, std::shared_ptr<const Classifier>> classifiers;
};

Workspace& workspace() {
  static Workspace ws;
  return ws;
}

void log_line(const RunOptions& opt, const std::string& msg) {
  if (opt.log) *opt.log << msg << std::endl;
}

std::shared_ptr<const DatasetManifest> base_dataset(const Json& d) {
  Json key_fields = d;
  key_fields.erase("task");
  key_fields.erase("kshot");
  key_fields.erase("fraction");
  const std::string key = json_hash(key_fields);
  auto& ws = workspace();
  std::lock_guard lock(ws.mu);
  auto& slot = ws.datasets[key];
  if (!slot) slot = std::make_shared<DatasetManifest>(generate_shapes(shape_spec(d), d["seed"]));
  return slot;
}

DatasetManifest backbone_corpus(const Json& cfg) {
  ShapeSpec s = shape_spec(cfg["dataset"]);
  s.families = static_cast<int>(family_names().size());
  s.train_per_class = cfg["backbone"]["corpus_per_class"];
  s.test_per_class = 0;
  s.random_tones = true;
  return generate_shapes(s, cfg["backbone"]["seed"]);
}

std::string backbone_key(const Json& cfg) {
  return json_hash({{"backbone", cfg["backbone"]}, {"render", render_fields(cfg["dataset"])}});
}

std::shared_ptr<const Checkpoint> backbone(const Json& cfg, const RunOptions& opt) {
  const std::string key = backbone_key(cfg);
  auto& ws = workspace();
  std::lock_guard lock(ws.mu);
  auto& slot = ws.backbones[key];
  if (slot) return slot;
  const fs::path cache = fs::path(cfg["cache_dir"].get<std::string>()) / ("backbone-" + key + ".ckpt");
  if (fs::exists(cache)) {
    slot = std::make_shared<Checkpoint>(load_checkpoint(cache));
    return slot;
  }
  log_line(opt, "training backbone " + key);
  const Json& b = cfg["backbone"];
  DenoiserArch arch;
  arch.image_dim = static_cast<std::size_t>(cfg["dataset"]["image_size"].get<int>() *
                                            cfg["dataset"]["image_size"].get<int>() * 3);
  arch.hidden = b["hidden"];
  arch.depth = b["depth"];
  arch.cond_dim = b["cond_dim"];
  arch.time_dim = b["time_dim"];
  const std::uint64_t seed = b["seed"];
  Checkpoint ck{DenoiserModel(arch), make_default_schedule(b["schedule_steps"]),
                {{"backbone", seed}}};
  Rng rng(derive_seed(seed, "backbone_init"));
  ck.model.init(rng);
  auto random_vec = [&] {
    Tensor v({arch.cond_dim});
    rng.fill_normal(v.values());
    return v;
  };
  for (const auto& f : family_names()) ck.model.concepts().set_token(f, random_vec());
  for (const auto& s : kBackgroundSuffixes) ck.model.concepts().set_suffix(s, random_vec());
  for (const auto& s : kToneSuffixes) ck.model.concepts().set_suffix(s, random_vec());

  const DatasetManifest corpus = backbone_corpus(cfg);
  std::vector<BackboneExample> examples;
  for (const auto& s : corpus.train) {
    const Tensor x = to_model_space(s.image);
    const std::string fam = corpus.hierarchy.coarse_names[static_cast<std::size_t>(s.coarse)];
    examples.push_back({x, Prompt{fam, ""}});
    examples.push_back({x, Prompt{fam, s.annotation}});
    auto tone = s.provenance.extra.find("tone");
    if (tone != s.provenance.extra.end()) examples.push_back({x, Prompt{fam, tone->second}});
  }
  BackboneConfig bc;
  bc.steps = b["steps"];
  bc.batch = b["batch"];
  bc.lr = b["lr"];
  bc.cond_dropout = b["cond_dropout"];
  bc.seed = seed;
  train_backbone(ck.model, ck.schedule, examples, bc);
  save_checkpoint(ck, cache);
  slot = std::make_shared<Checkpoint>(std::move(ck));
  return slot;
}

ClassifierConfig classifier_config(const Json& k, std::uint64_t seed) {
  ClassifierConfig c;
  c.size = k["size"] == "small" ? ClassifierSize::small : ClassifierSize::large;
  c.lr = k["lr"];
  c.momentum = k["momentum"];
  c.weight_decay = k["weight_decay"];
  c.batch = k["batch"];
  c.epochs = k["epochs"];
  c.label_smoothing = k["label_smoothing"];
  const std::string mix = k["mix"];
  c.mix = mix == "mixup" ? BatchMix::mixup : mix == "cutmix" ? BatchMix::cutmix : BatchMix::none;
  c.mix_alpha = k["mix_alpha"];
  c.seed = seed;
  return c;
}

DatasetManifest task_dataset(const Json& cfg) {
  const Json& d = cfg["dataset"];
  DatasetManifest m = *base_dataset(d);
  if (d["task"] == "coarse") m = relabel_to_coarse(m);
  return m;
}

// Frozen feature extractor for FID / precision-recall: a small classifier
// trained once on the full training split of the task with a fixed seed.
std::shared_ptr<const Classifier> reference_classifier(const Json& cfg) {
  const std::string key = "reference-" + json_hash(cfg["dataset"]);
  {
    auto& ws = workspace();
    std::lock_guard lock(ws.mu);
    if (auto it = ws.classifiers.find(key); it != ws.classifiers.end()) return it->second;
  }
  Json d = cfg["dataset"];
  d["kshot"] = 0;
  d["fraction"] = 1.0;
  Json c = cfg;
  c["dataset"] = d;
  const DatasetManifest m = task_dataset(c);
  ClassifierConfig cc;
  cc.epochs = 30;
  cc.seed = 0x5eed;
  auto model = std::make_shared<Classifier>(train_classifier(m.train, m.hierarchy.num_fine(), cc).model);
  auto& ws = workspace();
  std::lock_guard lock(ws.mu);
  ws.classifiers[key] = model;
  return model;
}

// Superset pretraining: coarse labels of the backbone corpus.
std::shared_ptr<const Classifier> pretrained_classifier(const Json& cfg) {
  const std::string key =
      "pretrained-" + json_hash({{"corpus", backbone_key(cfg)}, {"classifier", cfg["classifier"]}});
  {
    auto& ws = workspace();
    std::lock_guard lock(ws.mu);
    if (auto it = ws.classifiers.find(key); it != ws.classifiers.end()) return it->second;
  }
  const DatasetManifest corpus = relabel_to_coarse(backbone_corpus(cfg));
  ClassifierConfig cc = classifier_config(cfg["classifier"], 0x9e7);
  cc.epochs = cfg["classifier"]["pretrain_epochs"];
  cc.label_smoothing = 0.0;
  auto model = std::make_shared<Classifier>(
      train_classifier(corpus.train, corpus.hierarchy.num_fine(), cc).model);
  auto& ws = workspace();
  std::lock_guard lock(ws.mu);
  ws.classifiers[key] = model;
  return model;
}

GenerationSpec generation_spec(const Json& g, std::uint64_t seed) {
  GenerationSpec s;
  s.strategy = strategy_from_string(g["strategy"]);
  s.strength = g["strength"];
  s.ratio = g["ratio"];
  s.suffix_policy = suffix_policy_from_string(g["suffix_policy"]);
  s.sampler.kind = g["sampler"] == "ddim" ? SamplerKind::ddim : SamplerKind::ancestral;
  s.sampler.steps = g["sampler_steps"];
  s.sampler.eta = g["eta"];
  s.sampler.guidance_w = g["guidance_w"];
  s.seed = seed;
  s.two_stage_r = g["two_stage_r"];
  if (!g["lambda"].is_null()) s.lambda = g["lambda"].get<double>();
  s.style_strength = g["style_strength"];
  s.fractal_gamma = g["fractal_gamma"];
  s.opt_steps = g["opt_steps"];
  s.w_info = g["w_info"];
  s.w_div = g["w_div"];
  s.opt_lr = g["opt_lr"];
  return s;
}

class StageTimer {
 public:
  explicit StageTimer(double& slot) : slot_(slot), start_(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    slot_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  double& slot_;
  std::chrono::steady_clock::time_point start_;
};

void write_json(const fs::path& path, const Json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(1) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

DatasetManifest samples_manifest(const DatasetManifest& like, std::vector<LabeledSample> train) {
  DatasetManifest m;
  m.hierarchy = like.hierarchy;
  m.seed = like.seed;
  m.spec_hash = like.spec_hash;
  m.train = std::move(train);
  return m;
}

void run_seed(const Json& cfg, std::uint64_t seed, const RunOptions& opt, SeedResult& out) {
  const Json& d = cfg["dataset"];
  const Json& ft = cfg["finetune"];
  const Json& gen = cfg["generation"];
  const fs::path cache_dir = cfg["cache_dir"].get<std::string>();
  const fs::path seed_dir = fs::path(cfg["output_dir"].get<std::string>()) / ("seed-" + std::to_string(seed));
  out.seed = seed;
  out.knn_k = cfg["metrics"]["knn_k"];
  for (const char* stage : {"finetune", "generate", "classify"}) out.stage_seconds[stage] = 0.0;

  out.failed_stage = "data";
  DatasetManifest data = task_dataset(cfg);
  if (d["kshot"] > 0) data = kshot_subset(data, d["kshot"], derive_seed(seed, "subset"));
  if (d["fraction"] < 1.0) data = fraction_subset(data, d["fraction"], derive_seed(seed, "subset"));
  const std::size_t classes = data.hierarchy.num_fine();
  out.n_real = static_cast<int>(data.train.size());
  if (opt.write_artifacts) save_manifest(samples_manifest(data, data.train), seed_dir / "real");

  std::vector<LabeledSample> synthetic;
  std::shared_ptr<const Classifier> guide;
  auto guide_classifier = [&] {
    if (!guide) {
      guide = std::make_shared<Classifier>(
          train_classifier(data.train, classes,
                           classifier_config(cfg["classifier"], derive_seed(seed, "guide")))
              .model);
    }
    return guide;
  };

  const bool generating = gen["enabled"].get<bool>();
  if (generating || opt.stop_after == StopAfter::finetune) {
    out.failed_stage = "finetune";
    std::shared_ptr<const Checkpoint> base = backbone(cfg, opt);
    Checkpoint model = *base;
    ClassTokens tokens;
    std::string model_key = backbone_key(cfg);
    {
      StageTimer timer(out.stage_seconds["finetune"]);
      if (ft["enabled"].get<bool>()) {
        tokens = data.hierarchy.fine_names;
        model_key = json_hash({{"backbone", model_key}, {"dataset", d}, {"finetune", ft}, {"seed", seed}});
        const fs::path ckpt_path = cache_dir / ("finetune-" + model_key + ".ckpt");
        const fs::path loss_path = cache_dir / ("finetune-" + model_key + ".json");
        if (fs::exists(ckpt_path) && fs::exists(loss_path)) {
          model = load_checkpoint(ckpt_path);
          const Json losses = read_json(loss_path);
          out.concept_loss = losses["concept_loss"].get<std::vector<double>>();
          out.lora_loss = losses["lora_loss"].get<std::vector<double>>();
          out.lora_loss_before = optional_from(losses["lora_loss_before"]);
          out.lora_loss_after = optional_from(losses["lora_loss_after"]);
        } else {
          log_line(opt, "fine-tuning seed " + std::to_string(seed));
          // New tokens start from the embedding of their shape family.
          for (std::size_t c = 0; c < classes; ++c) {
            const auto fam = data.hierarchy.coarse_names[static_cast<std::size_t>(
                data.hierarchy.fine_to_coarse[c])];
            if (!model.model.concepts().has_token(tokens[c]) && model.model.concepts().has_token(fam)) {
              model.model.concepts().set_token(tokens[c], model.model.concepts().token(fam));
            }
          }
          FinetuneConfig fc;
          fc.batch = ft["batch"];
          fc.prompt_policy = ft["prompt_policy"] == "plain" ? PromptPolicy::plain
                                                            : PromptPolicy::suffix_enriched;
          fc.seed = derive_seed(seed, "finetune");
          std::vector<int> ids(classes);
          for (std::size_t c = 0; c < classes; ++c) ids[c] = static_cast<int>(c);
          fc.phase = FinetunePhase::concept_only;
          fc.steps = ft["concept_steps"];
          fc.lr = ft["concept_lr"];
          ConceptResult cr = textual_inversion(model.model, model.schedule, data.train, tokens, ids, fc);
          model.model.concepts() = std::move(cr.table);
          out.concept_loss = std::move(cr.loss_history);
          if (ft["lora_steps"] > 0) {
            fc.phase = FinetunePhase::lora;
            fc.steps = ft["lora_steps"];
            fc.lr = ft["lora_lr"];
            fc.lora_rank = ft["lora_rank"];
            fc.lora_alpha = ft["lora_alpha"];
            fc.lora_layers = ft["lora_layers"].get<std::vector<std::string>>();
            LoraResult lr = dreambooth_lora(model.model, model.schedule, data.train, tokens, fc);
            model.model.attach_adapters(std::move(lr.adapters));
            out.lora_loss = std::move(lr.loss_history);
            out.lora_loss_before = lr.loss_before;
            out.lora_loss_after = lr.loss_after;
          }
          model.lineage["finetune"] = fc.seed;
          save_checkpoint(model, ckpt_path);
          write_json(loss_path, {{"concept_loss", out.concept_loss},
                                 {"lora_loss", out.lora_loss},
                                 {"lora_loss_before", optional_json(out.lora_loss_before)},
                                 {"lora_loss_after", optional_json(out.lora_loss_after)}});
        }
        if (opt.write_artifacts) save_checkpoint(model, seed_dir / "finetuned.ckpt");
      } else {
        // Untuned backbone: each class is prompted with its shape family.
        for (std::size_t c = 0; c < classes; ++c) {
          tokens.push_back(data.hierarchy.coarse_names[static_cast<std::size_t>(
              data.hierarchy.fine_to_coarse[c])]);
        }
      }
    }
    if (opt.stop_after == StopAfter::finetune) {
      out.failed_stage.clear();
      return;
    }

    out.failed_stage = "generate";
    {
      StageTimer timer(out.stage_seconds["generate"]);
      const std::string synth_key = json_hash(
          {{"model", model_key}, {"dataset", d}, {"generation", gen}, {"seed", seed},
           {"classifier", gen["strategy"] == "latent_optimized_sdedit" ? cfg["classifier"] : Json()}});
      const fs::path synth_dir = cache_dir / ("synthetic-" + synth_key);
      if (fs::exists(synth_dir / "manifest.json")) {
        synthetic = load_manifest(synth_dir).train;
      } else {
        log_line(opt, "generating seed " + std::to_string(seed));
        ModelPredictor predictor(model.model, model.schedule);
        GenerationContext ctx;
        ctx.predictor = &predictor;
        ctx.model = &model.model;
        ctx.schedule = &model.schedule;
        ctx.hierarchy = &data.hierarchy;
        ctx.tokens = tokens;
        set_default_vocabulary(ctx, data.train);
        const GenerationSpec spec = generation_spec(gen, derive_seed(seed, "generate"));
        std::unique_ptr<ClassifierScorer> scorer;
        if (spec.strategy == Strategy::latent_optimized_sdedit) {
          scorer = std::make_unique<ClassifierScorer>(*guide_classifier());
        }
        synthetic = augment_dataset(ctx, data.train, spec, scorer.get()).synthetic;
        save_manifest(samples_manifest(data, synthetic), synth_dir);
      }
      for (const auto& s : synthetic)
        if (s.provenance.extra.count("fallback")) ++out.fallbacks;
      if (out.fallbacks > 0) {
        out.notes.push_back(std::to_string(out.fallbacks) + " variants fell back to sdedit");
      }

      const Json& flt = cfg["utilization"]["filter"];
      if (flt["enabled"].get<bool>()) {
        out.failed_stage = "filter";
        FilterSpec fspec;
        fspec.scorer = filter_scorer_from_string(flt["scorer"]);
        fspec.drop_fraction = flt["drop_fraction"];
        fspec.per_class = flt["per_class"];
        FilterResult fr = filter_synthetic(synthetic, *guide_classifier(), fspec, data.train);
        out.n_filtered_out = static_cast<int>(fr.dropped.size());
        out.notes.push_back(std::string("filter ") + to_string(fspec.scorer) +
                            (fspec.per_class ? " per-class" : " global"));
        if (opt.write_artifacts) {
          fs::create_directories(seed_dir);
          write_filter_audit(fr, fspec, seed_dir / "filter_audit.json");
        }
        synthetic = std::move(fr.kept);
      }
      if (opt.write_artifacts) save_manifest(samples_manifest(data, synthetic), seed_dir / "synthetic");
    }
    out.n_synthetic = static_cast<int>(synthetic.size());
    if (opt.stop_after == StopAfter::generate) {
      out.failed_stage.clear();
      return;
    }
  }

  out.failed_stage = "classify";
  {
    StageTimer timer(out.stage_seconds["classify"]);
    ClassifierConfig cc = classifier_config(cfg["classifier"], derive_seed(seed, "classifier"));
    std::shared_ptr<const Classifier> pre;
    if (cfg["classifier"]["init"] == "pretrained") {
      pre = pretrained_classifier(cfg);
      cc.init_from = pre.get();
    }
    const Utilization strategy = utilization_from_string(cfg["utilization"]["strategy"]);
    TrainedClassifier trained;
    if (!generating) {
      out.notes.push_back("baseline: real data only");
      trained = train_classifier(data.train, classes, cc);
    } else if (strategy == Utilization::full_concat || strategy == Utilization::full_replace) {
      const auto set = compose_static(data.train, synthetic, strategy);
      trained = train_classifier(set, classes, cc);
    } else {
      const EpochViewer viewer(data.train, synthetic, strategy, cfg["utilization"]["p"]);
      const std::uint64_t run_seed = derive_seed(seed, "epochs");
      trained = train_classifier([&](int e) { return viewer.view(epoch_seed(run_seed, e)); },
                                 classes, cc);
    }

    out.failed_stage = "evaluate";
    const EvalResult ev = evaluate(trained.model, data.test);
    out.top1 = ev.top1;
    out.top5 = ev.top5;
    out.per_class = ev.per_class;
  }
  if (opt.stop_after == StopAfter::train) {
    out.failed_stage.clear();
    return;
  }

  out.failed_stage = "metrics";
  const Json& met = cfg["metrics"];
  if ((met["fid"].get<bool>() || met["precision_recall"].get<bool>()) && !synthetic.empty()) {
    const auto ref = reference_classifier(cfg);
    const Tensor fr = ref->features(stack_images(data.test));
    const Tensor fg = ref->features(stack_images(synthetic));
    if (met["fid"].get<bool>()) {
      const FidResult f = fid(fr, fg);
      out.fid = f.value;
      out.fid_regularized = f.regularized;
      if (f.regularized) out.notes.push_back("fid covariance regularized with 1e-6 I");
    }
    if (met["precision_recall"].get<bool>()) {
      const PrecisionRecall pr = precision_recall(fr, fg, static_cast<std::size_t>(out.knn_k));
      out.precision = pr.precision;
      out.recall = pr.recall;
    }
  }
  out.failed_stage.clear();
}

}  // namespace

RunReport run_experiment(const Json& config, const RunOptions& options) {
  const Json cfg = merge_config(config);
  validate_config(cfg);
  RunReport report;
  report.config_hash = config_hash(cfg);
  for (const auto& s : cfg["seeds"]) {
    SeedResult r;
    try {
      run_seed(cfg, s.get<std::uint64_t>(), options, r);
    } catch (const std::exception& e) {
      r.error = e.what();
      if (r.failed_stage.empty()) r.failed_stage = "unknown";
      log_line(options, "seed " + std::to_string(s.get<std::uint64_t>()) + " failed in " +
                            r.failed_stage + ": " + r.error);
    }
    report.seeds.push_back(std::move(r));
  }
  summarize(report);
  if (options.write_artifacts) {
    const fs::path out = cfg["output_dir"].get<std::string>();
    write_json(out / "config.json", cfg);
    write_json(out / "report.json", report_to_json(report));
    write_json(out / "timing.json", timing_to_json(report));
  }
  return report;
}

std::shared_ptr<const Checkpoint> backbone_checkpoint(const Json& config, std::ostream* log) {
  const Json cfg = merge_config(config);
  validate_config(cfg);
  RunOptions opt;
  opt.log = log;
  return backbone(cfg, opt);
}

DatasetManifest task_dataset_for(const Json& config) {
  const Json cfg = merge_config(config);
  validate_config(cfg);
  return task_dataset(cfg);
}

Json evaluate_synthetic(const Json& config, const fs::path& synthetic_dir) {
  const Json cfg = merge_config(config);
  validate_config(cfg);
  const DatasetManifest synth = load_manifest(synthetic_dir);
  if (synth.train.size() < 2) throw ParameterError("need at least two synthetic samples");
  const DatasetManifest data = task_dataset(cfg);
  const auto ref = reference_classifier(cfg);
  const Tensor fr = ref->features(stack_images(data.test));
  const Tensor fg = ref->features(stack_images(synth.train));
  const FidResult f = fid(fr, fg);
  const std::size_t k = cfg["metrics"]["knn_k"];
  const PrecisionRecall pr = precision_recall(fr, fg, k);
  return Json{{"fid", f.value}, {"fid_regularized", f.regularized}, {"precision", pr.precision},
              {"recall", pr.recall}, {"knn_k", k}, {"n_real", data.test.size()},
              {"n_synthetic", synth.train.size()}};
}

// ---------------------------------------------------------------- grids

namespace {

double axis_number(const Json& v) { return v.is_number() ? v.get<double>() : 0.0; }

GridResult run_grid(const GridAxis& rows, const GridAxis& cols,
                    const std::vector<Json>& cell_configs, const Runner& runner) {
  GridResult g{rows, cols, {}, 0};
  for (std::size_t i = 0; i < cell_configs.size(); ++i) {
    RunReport r = runner(cell_configs[i]);
    r.cell = Json{{rows.key, rows.values[i / cols.values.size()]},
                  {cols.key, cols.values[i % cols.values.size()]}};
    g.cells.push_back(std::move(r));
  }
  for (std::size_t i = 1; i < g.cells.size(); ++i) {
    const auto& a = g.cells[i];
    const auto& b = g.cells[g.best];
    if (a.failed) continue;
    if (b.failed || a.top1_mean > b.top1_mean) {
      g.best = i;
      continue;
    }
    if (a.top1_mean < b.top1_mean) continue;
    const double ar = axis_number(rows.values[i / cols.values.size()]);
    const double br = axis_number(rows.values[g.best / cols.values.size()]);
    const double ac = axis_number(cols.values[i % cols.values.size()]);
    const double bc = axis_number(cols.values[g.best % cols.values.size()]);
    if (ar < br || (ar == br && ac < bc)) g.best = i;
  }
  return g;
}

std::vector<Json> cell_configs(const Json& base, const GridAxis& rows, const GridAxis& cols,
                               const std::function<void(Json&, const Json&, const Json&)>& apply) {
  if (rows.values.empty() || cols.values.empty()) throw ParameterError("grid axes must be non-empty");
  const Json merged = merge_config(base);
  std::vector<Json> out;
  for (std::size_t i = 0; i < rows.values.size(); ++i) {
    for (std::size_t j = 0; j < cols.values.size(); ++j) {
      Json c = merged;
      apply(c, rows.values[i], cols.values[j]);
      c["output_dir"] = (fs::path(merged["output_dir"].get<std::string>()) /
                         ("cell-" + std::to_string(i) + "-" + std::to_string(j)))
                            .string();
      validate_config(c);
      out.push_back(std::move(c));
    }
  }
  return out;
}

std::string csv_value(const Json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

}  // namespace

GridResult grid_search(const Json& base, const GridAxis& rows, const GridAxis& cols,
                       const Runner& runner) {
  const auto configs = cell_configs(base, rows, cols, [&](Json& c, const Json& r, const Json& k) {
    set_config_value(c, rows.key, r);
    set_config_value(c, cols.key, k);
  });
  return run_grid(rows, cols, configs, runner);
}

GridResult data_size_sweep(const Json& base, const std::vector<double>& fractions,
                           const std::vector<int>& ratios, const Runner& runner) {
  for (double f : fractions)
    if (!(f > 0.0 && f <= 1.0)) throw ParameterError("sweep fractions must lie in (0, 1]");
  for (int r : ratios)
    if (r < 0) throw ParameterError("sweep expansion ratios must be >= 0");
  GridAxis rows{"dataset.fraction", {}}, cols{"generation.ratio", {}};
  for (double f : fractions) rows.values.emplace_back(f);
  for (int r : ratios) cols.values.emplace_back(r);
  const auto configs = cell_configs(base, rows, cols, [](Json& c, const Json& f, const Json& r) {
    c["dataset"]["fraction"] = f;
    if (r.get<int>() == 0) {
      c["generation"]["enabled"] = false;
    } else {
      c["generation"]["ratio"] = r;
    }
  });
  return run_grid(rows, cols, configs, runner);
}

void write_grid_csv(const GridResult& grid, const fs::path& path) {
  std::vector<RunReport> reports = grid.cells;
  emit_report(reports, ReportFormat::csv, path);
}

ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::json;
  if (s == "csv") return ReportFormat::csv;
  if (s == "plotdata") return ReportFormat::plotdata;
  throw ParameterError("unknown report format '" + s + "' (json, csv, plotdata)");
}

void emit_report(const std::vector<RunReport>& reports, ReportFormat format, const fs::path& path) {
  if (reports.empty()) throw ParameterError("no reports to emit");
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  if (format == ReportFormat::json) {
    Json arr = Json::array();
    for (const auto& r : reports) arr.push_back(report_to_json(r));
    out << arr.dump(1) << '\n';
  } else {
    std::vector<std::string> keys;
    for (const auto& [k, v] : reports.front().cell.items()) keys.push_back(k);
    // Cells iterate in key order; keep the axis order of the grid when possible.
    if (format == ReportFormat::csv) {
      out << "config_hash";
      for (const auto& k : keys) out << ',' << k;
      out << ",seeds,top1_mean,top1_std,top5_mean,top5_std,failed\n";
      for (const auto& r : reports) {
        out << r.config_hash;
        for (const auto& k : keys) out << ',' << (r.cell.contains(k) ? csv_value(r.cell[k]) : "");
        char buf[160];
        std::snprintf(buf, sizeof buf, ",%zu,%.6f,%.6f,%.6f,%.6f,%d\n", r.seeds.size(), r.top1_mean,
                      r.top1_std, r.top5_mean, r.top5_std, r.failed ? 1 : 0);
        out << buf;
      }
    } else {
      auto short_name = [](const std::string& k) {
        const auto dot = k.rfind('.');
        return dot == std::string::npos ? k : k.substr(dot + 1);
      };
      const std::string x = keys.size() > 0 ? keys[0] : "";
      const std::string series = keys.size() > 1 ? keys[1] : "";
      out << (x.empty() ? "index" : short_name(x)) << ','
          << (series.empty() ? "series" : short_name(series)) << ",top1\n";
      for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& r = reports[i];
        out << (x.empty() ? std::to_string(i) : csv_value(r.cell[x])) << ','
            << (series.empty() ? "" : csv_value(r.cell[series]));
        char buf[64];
        std::snprintf(buf, sizeof buf, ",%.6f\n", r.top1_mean);
        out << buf;
      }
    }
  }
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace unidiff

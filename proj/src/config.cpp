#include "unidiff/config.hpp"

#include <fstream>
#include <sstream>

#include "unidiff/errors.hpp"
#include "unidiff/rng.hpp"

namespace unidiff {

Json default_config() {
  return Json::parse(R"({
  "format_version": 1,
  "dataset": {
    "families": 4, "variants": 3, "train_per_class": 20, "test_per_class": 50,
    "image_size": 16, "noise": 0.03, "background": "mixed",
    "hue_step": 0.035, "stripe_amplitude": 0.12, "seed": 1,
    "task": "fine", "kshot": 0, "fraction": 1.0
  },
  "backbone": {
    "corpus_per_class": 60, "steps": 3000, "batch": 32, "lr": 0.001, "cond_dropout": 0.1,
    "hidden": 256, "depth": 3, "cond_dim": 32, "time_dim": 32, "schedule_steps": 25, "seed": 7
  },
  "finetune": {
    "enabled": false, "prompt_policy": "plain", "batch": 16,
    "concept_steps": 200, "concept_lr": 0.0005,
    "lora_steps": 200, "lora_lr": 0.000005, "lora_rank": 8, "lora_alpha": 8.0,
    "lora_layers": ["hidden0", "hidden1"]
  },
  "generation": {
    "enabled": true, "strategy": "sdedit", "strength": 0.9, "ratio": 5,
    "suffix_policy": "none", "sampler": "ddim", "sampler_steps": 0, "eta": 0.0,
    "guidance_w": 2.0, "two_stage_r": 0.0, "lambda": null,
    "style_strength": 0.5, "fractal_gamma": 0.2,
    "opt_steps": 5, "w_info": 1.0, "w_div": 0.0, "opt_lr": 0.05
  },
  "utilization": {
    "strategy": "full_concat", "p": 0.5,
    "filter": {"enabled": false, "scorer": "base_prob", "drop_fraction": 0.1, "per_class": false}
  },
  "classifier": {
    "size": "small", "init": "scratch", "lr": 0.05, "momentum": 0.9, "weight_decay": 0.0005,
    "batch": 32, "epochs": 30, "label_smoothing": 0.1, "mix": "none", "mix_alpha": 1.0,
    "pretrain_epochs": 20
  },
  "metrics": {"fid": false, "precision_recall": false, "knn_k": 3},
  "seeds": [0],
  "output_dir": "runs/default",
  "cache_dir": ".unidiff-cache"
})");
}

namespace {

bool compatible(const Json& def, const Json& val) {
  if (def.is_null()) return val.is_null() || val.is_number();
  if (def.is_number_float()) return val.is_number();
  if (def.is_number_integer()) return val.is_number_integer();
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_string()) return val.is_string();
  if (def.is_array()) {
    if (!val.is_array()) return false;
    if (def.empty()) return true;
    for (const auto& v : val)
      if (!compatible(def.front(), v)) return false;
    return true;
  }
  return def.is_object() && val.is_object();
}

void overlay(Json& base, const Json& user, const std::string& path) {
  for (const auto& [key, val] : user.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ParameterError("unknown config key '" + where + "'");
    Json& slot = base[key];
    if (!compatible(slot, val)) {
      throw ParameterError("config key '" + where + "' expects " + std::string(slot.type_name()) +
                           ", got " + val.type_name());
    }
    if (slot.is_object()) {
      overlay(slot, val, where);
    } else {
      slot = val;
    }
  }
}

Json lookup_default(const std::string& dotted_key) {
  Json node = default_config();
  std::stringstream ss(dotted_key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node.is_object() || !node.contains(part)) {
      throw ParameterError("unknown config key '" + dotted_key + "'");
    }
    Json next = node[part];
    node = std::move(next);
  }
  return node;
}

void require_enum(const Json& v, const std::string& key, std::initializer_list<const char*> names) {
  for (const char* n : names)
    if (v.get<std::string>() == n) return;
  std::string all;
  for (const char* n : names) all += std::string(all.empty() ? "" : ", ") + n;
  throw ParameterError("config key '" + key + "' must be one of: " + all);
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ParameterError(message);
}

}  // namespace

Json merge_config(const Json& user) {
  if (!user.is_object()) throw ParameterError("config must be a JSON object");
  Json cfg = default_config();
  overlay(cfg, user, "");
  if (cfg["format_version"] != 1) throw FormatError("unsupported config format_version");
  return cfg;
}

Json load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  Json user;
  try {
    user = Json::parse(in, nullptr, true, true);
  } catch (const Json::exception& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
  return merge_config(user);
}

const Json& get_config_value(const Json& config, const std::string& dotted_key) {
  const Json* node = &config;
  std::stringstream ss(dotted_key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) {
      throw ParameterError("unknown config key '" + dotted_key + "'");
    }
    node = &(*node)[part];
  }
  return *node;
}

void set_config_value(Json& config, const std::string& dotted_key, const Json& value) {
  const Json def = lookup_default(dotted_key);
  if (!compatible(def, value)) {
    throw ParameterError("config key '" + dotted_key + "' expects " + std::string(def.type_name()) +
                         ", got " + value.type_name());
  }
  Json* node = &config;
  std::stringstream ss(dotted_key);
  std::string part;
  while (std::getline(ss, part, '.')) node = &(*node)[part];
  *node = value;
}

void apply_override(Json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ParameterError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  // Let integer literals feed float fields and bare words feed string fields.
  const Json def = lookup_default(key);
  if (def.is_string() && !value.is_string()) value = text;
  set_config_value(config, key, value);
}

void validate_config(const Json& c) {
  const Json& d = c.at("dataset");
  require(d["families"] >= 1 && d["families"] <= 6, "dataset.families must lie in [1, 6]");
  require(d["variants"] >= 1, "dataset.variants must be >= 1");
  require(d["train_per_class"] >= 1, "dataset.train_per_class must be >= 1");
  require(d["test_per_class"] >= 1, "dataset.test_per_class must be >= 1");
  require(d["image_size"] >= 8, "dataset.image_size must be >= 8");
  require(d["noise"] >= 0.0, "dataset.noise must be >= 0");
  require_enum(d["background"], "dataset.background", {"plain", "cluttered", "mixed"});
  require_enum(d["task"], "dataset.task", {"fine", "coarse"});
  require(d["kshot"] >= 0, "dataset.kshot must be >= 0 (0 = all)");
  require(d["fraction"] > 0.0 && d["fraction"] <= 1.0, "dataset.fraction must lie in (0, 1]");

  const Json& b = c.at("backbone");
  require(b["corpus_per_class"] >= 1 && b["steps"] >= 0 && b["batch"] >= 1,
          "backbone corpus/steps/batch out of range");
  require(b["lr"] > 0.0, "backbone.lr must be > 0");
  require(b["cond_dropout"] >= 0.0 && b["cond_dropout"] <= 1.0, "backbone.cond_dropout must lie in [0, 1]");
  require(b["hidden"] >= 1 && b["depth"] >= 1 && b["cond_dim"] >= 1, "backbone dims must be >= 1");
  require(b["time_dim"] >= 2 && b["time_dim"].get<int>() % 2 == 0, "backbone.time_dim must be even");
  require(b["schedule_steps"] >= 1, "backbone.schedule_steps must be >= 1");

  const Json& f = c.at("finetune");
  require_enum(f["prompt_policy"], "finetune.prompt_policy", {"plain", "suffix_enriched"});
  require(f["concept_steps"] >= 0 && f["lora_steps"] >= 0, "finetune steps must be >= 0");
  require(f["concept_lr"] > 0.0 && f["lora_lr"] > 0.0, "finetune learning rates must be > 0");
  require(f["lora_rank"] >= 1, "finetune.lora_rank must be >= 1");
  require(f["batch"] >= 1, "finetune.batch must be >= 1");

  const Json& g = c.at("generation");
  require_enum(g["strategy"], "generation.strategy",
               {"sdedit", "interclass_mix", "invert_interpolate", "stylemix_composite",
                "latent_optimized_sdedit"});
  require(g["strength"] > 0.0 && g["strength"] <= 1.0, "generation.strength must lie in (0, 1]");
  require(g["ratio"] >= 1, "generation.ratio must be >= 1");
  require_enum(g["suffix_policy"], "generation.suffix_policy", {"none", "pool", "dream", "exchange"});
  require_enum(g["sampler"], "generation.sampler", {"ddim", "ancestral"});
  require(g["sampler_steps"] >= 0 && g["sampler_steps"] <= b["schedule_steps"],
          "generation.sampler_steps must lie in [0, backbone.schedule_steps]");
  require(g["eta"] >= 0.0, "generation.eta must be >= 0");
  require(g["guidance_w"] >= 0.0, "generation.guidance_w must be >= 0");
  require(g["two_stage_r"] >= 0.0 && g["two_stage_r"] <= 1.0, "generation.two_stage_r must lie in [0, 1]");
  require(g["two_stage_r"] == 0.0 || g["strategy"] == "invert_interpolate",
          "generation.two_stage_r only applies to invert_interpolate");
  require(g["lambda"].is_null() || (g["lambda"] >= 0.0 && g["lambda"] <= 1.0),
          "generation.lambda must be null or lie in [0, 1]");
  require(g["fractal_gamma"] >= 0.0 && g["fractal_gamma"] < 1.0, "generation.fractal_gamma must lie in [0, 1)");
  require(g["style_strength"] > 0.0 && g["style_strength"] <= 1.0, "generation.style_strength must lie in (0, 1]");
  require(g["opt_steps"] >= 0 && g["opt_lr"] > 0.0, "generation latent optimization settings out of range");

  const Json& u = c.at("utilization");
  require_enum(u["strategy"], "utilization.strategy",
               {"full_concat", "full_replace", "local_random_replace", "global_random_replace"});
  require(u["p"] >= 0.0 && u["p"] <= 1.0, "utilization.p must lie in [0, 1]");
  require_enum(u["filter"]["scorer"], "utilization.filter.scorer", {"base_prob", "multi_score", "binary_score"});
  require(u["filter"]["drop_fraction"] >= 0.0 && u["filter"]["drop_fraction"] < 1.0,
          "utilization.filter.drop_fraction must lie in [0, 1)");

  const Json& k = c.at("classifier");
  require_enum(k["size"], "classifier.size", {"small", "large"});
  require_enum(k["init"], "classifier.init", {"scratch", "pretrained"});
  require_enum(k["mix"], "classifier.mix", {"none", "mixup", "cutmix"});
  require(k["lr"] > 0.0 && k["batch"] >= 1 && k["epochs"] >= 1 && k["pretrain_epochs"] >= 1,
          "classifier lr/batch/epochs out of range");
  require(k["label_smoothing"] >= 0.0 && k["label_smoothing"] < 1.0,
          "classifier.label_smoothing must lie in [0, 1)");
  require(k["mix_alpha"] > 0.0, "classifier.mix_alpha must be > 0");

  require(c.at("metrics")["knn_k"] >= 1, "metrics.knn_k must be >= 1");
  require(!c.at("seeds").empty(), "seeds must list at least one seed");
  for (const auto& s : c.at("seeds")) require(s >= 0, "seeds must be non-negative");
}

std::string json_hash(const Json& value) {
  std::ostringstream os;
  os << std::hex << fnv1a64(value.dump());
  std::string h = os.str();
  return std::string(16 - h.size(), '0') + h;
}

std::string config_hash(const Json& config) {
  Json c = config;
  c.erase("output_dir");
  c.erase("cache_dir");
  return json_hash(c);
}

}  // namespace unidiff

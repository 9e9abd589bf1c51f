#include "unidiff/denoiser.hpp"

#include <cmath>

#include "unidiff/errors.hpp"

namespace unidiff {

using nn::Graph;
using nn::Tensor;
using nn::Var;

const Tensor& ConceptTable::token(const std::string& name) const {
  auto it = tokens_.find(name);
  if (it == tokens_.end()) throw ParameterError("unknown concept token '" + name + "'");
  return it->second;
}

Tensor& ConceptTable::token(const std::string& name) {
  auto it = tokens_.find(name);
  if (it == tokens_.end()) throw ParameterError("unknown concept token '" + name + "'");
  return it->second;
}

const Tensor& ConceptTable::suffix(const std::string& name) const {
  auto it = suffixes_.find(name);
  if (it == suffixes_.end()) throw ParameterError("unknown suffix '" + name + "'");
  return it->second;
}

Tensor& ConceptTable::suffix(const std::string& name) {
  auto it = suffixes_.find(name);
  if (it == suffixes_.end()) throw ParameterError("unknown suffix '" + name + "'");
  return it->second;
}

void ConceptTable::check_dim(const Tensor& v, const std::string& name) const {
  if (v.rank() != 1 || v.size() != dim_) {
    throw ShapeError("embedding '" + name + "' has shape " + nn::shape_str(v.shape()) +
                     ", table dimension is " + std::to_string(dim_));
  }
}

void ConceptTable::set_token(const std::string& name, Tensor value) {
  check_dim(value, name);
  tokens_[name] = std::move(value);
}

void ConceptTable::set_suffix(const std::string& name, Tensor value) {
  check_dim(value, name);
  suffixes_[name] = std::move(value);
}

std::vector<std::string> ConceptTable::token_names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : tokens_) out.push_back(k);
  return out;
}

std::vector<std::string> ConceptTable::suffix_names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : suffixes_) out.push_back(k);
  return out;
}

std::vector<double> time_features(int t, std::size_t time_dim) {
  std::vector<double> f(time_dim);
  const std::size_t half = time_dim / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(100.0) * static_cast<double>(k) /
                                 static_cast<double>(half > 1 ? half - 1 : 1));
    f[k] = std::sin(t * freq);
    f[half + k] = std::cos(t * freq);
  }
  return f;
}

DenoiserModel::DenoiserModel(DenoiserArch arch)
    : arch_(arch),
      input_(arch.image_dim, arch.hidden),
      time_(arch.time_dim, arch.hidden),
      cond_(arch.cond_dim, arch.hidden),
      output_(arch.hidden, arch.image_dim),
      concepts_(arch.cond_dim),
      null_embed_({arch.cond_dim}) {
  if (arch.depth < 1) throw ParameterError("denoiser depth must be >= 1");
  if (arch.time_dim < 2 || arch.time_dim % 2) throw ParameterError("time_dim must be even and >= 2");
  for (std::size_t i = 0; i + 1 < arch.depth; ++i) hidden_.emplace_back(arch.hidden, arch.hidden);
}

void DenoiserModel::init(Rng& rng, bool zero_output) {
  input_.init_normal(rng);
  time_.init_normal(rng);
  cond_.init_normal(rng);
  for (auto& h : hidden_) h.init_normal(rng);
  if (zero_output) {
    output_.weight.fill(0.0);
    output_.bias.fill(0.0);
  } else {
    output_.init_normal(rng);
  }
  for (double& v : null_embed_.storage()) v = rng.normal();
}

std::vector<std::string> DenoiserModel::layer_names() const {
  std::vector<std::string> names{"input", "time", "cond"};
  for (std::size_t i = 0; i < hidden_.size(); ++i) names.push_back("hidden" + std::to_string(i));
  names.push_back("output");
  return names;
}

const nn::Linear& DenoiserModel::layer(const std::string& name) const {
  if (name == "input") return input_;
  if (name == "time") return time_;
  if (name == "cond") return cond_;
  if (name == "output") return output_;
  if (name.rfind("hidden", 0) == 0) {
    const std::string idx = name.substr(6);
    if (!idx.empty() && idx.find_first_not_of("0123456789") == std::string::npos) {
      const std::size_t i = std::stoul(idx);
      if (i < hidden_.size()) return hidden_[i];
    }
  }
  throw ParameterError("unknown denoiser layer '" + name + "'");
}

nn::Linear& DenoiserModel::layer(const std::string& name) {
  return const_cast<nn::Linear&>(std::as_const(*this).layer(name));
}

std::vector<std::pair<std::string, Tensor*>> DenoiserModel::trunk_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (const auto& name : layer_names()) {
    auto& l = layer(name);
    out.emplace_back(name + ".weight", &l.weight);
    out.emplace_back(name + ".bias", &l.bias);
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> DenoiserModel::trunk_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [n, p] : const_cast<DenoiserModel*>(this)->trunk_parameters()) out.emplace_back(n, p);
  return out;
}

std::size_t DenoiserModel::trunk_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : trunk_parameters()) n += p->size();
  return n;
}

void DenoiserModel::attach_adapters(nn::AdapterSet adapters) {
  for (const auto& [name, a] : adapters) {
    const nn::Linear& l = layer(name);
    if (a.in_features() != l.in_features() || a.out_features() != l.out_features() ||
        a.up.cols() != a.rank()) {
      throw ParameterError("adapter for '" + name + "' has shape " + nn::shape_str(a.up.shape()) +
                           "*" + nn::shape_str(a.down.shape()) + ", layer is " +
                           nn::shape_str(l.weight.shape()));
    }
  }
  adapters_ = std::move(adapters);
}

nn::AdapterSet DenoiserModel::detach_adapters() { return std::exchange(adapters_, {}); }

std::vector<Tensor*> DenoiserModel::adapter_parameters() {
  std::vector<Tensor*> out;
  for (auto& [name, a] : adapters_) {
    out.push_back(&a.down);
    out.push_back(&a.up);
  }
  return out;
}

std::size_t DenoiserModel::adapter_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, a] : adapters_) n += a.parameter_count();
  return n;
}

Tensor DenoiserModel::condition(const Prompt& prompt) const {
  if (prompt.unconditional()) return null_embed_;
  Tensor c = concepts_.token(prompt.token);
  if (!prompt.suffix.empty()) {
    const Tensor& s = concepts_.suffix(prompt.suffix);
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += s[i];
  }
  return c;
}

Var DenoiserModel::condition(Graph& g, std::span<const Prompt> prompts) const {
  std::vector<std::vector<Var>> rows;
  rows.reserve(prompts.size());
  for (const Prompt& p : prompts) {
    std::vector<Var> row;
    if (p.unconditional()) {
      row.push_back(g.param(null_embed_));
    } else {
      row.push_back(g.param(concepts_.token(p.token)));
      if (!p.suffix.empty()) row.push_back(g.param(concepts_.suffix(p.suffix)));
    }
    rows.push_back(std::move(row));
  }
  return nn::stack_rows(g, rows, arch_.cond_dim);
}

Var DenoiserModel::forward(Graph& g, Var x, std::span<const int> t, Var cond) const {
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows();
  if (xv.cols() != arch_.image_dim) {
    throw ShapeError("denoiser input " + nn::shape_str(xv.shape()) + ", expected rows of " +
                     std::to_string(arch_.image_dim));
  }
  if (t.size() != n) throw ShapeError("denoiser: " + std::to_string(t.size()) + " steps for " +
                                      std::to_string(n) + " rows");
  const Tensor& cv = cond.value();
  if (cv.rows() != n || cv.cols() != arch_.cond_dim) {
    throw ShapeError("denoiser condition " + nn::shape_str(cv.shape()) + ", expected [" +
                     std::to_string(n) + "x" + std::to_string(arch_.cond_dim) + "]");
  }
  Tensor tf({n, arch_.time_dim});
  for (std::size_t i = 0; i < n; ++i) {
    if (t[i] < 1) throw ParameterError("denoiser step index must be >= 1");
    const auto f = time_features(t[i], arch_.time_dim);
    std::copy(f.begin(), f.end(), tf.data() + i * arch_.time_dim);
  }
  auto adapter = [&](const std::string& name) -> const nn::LoraAdapter* {
    auto it = adapters_.find(name);
    return it == adapters_.end() ? nullptr : &it->second;
  };
  Var h = input_.forward(g, x, adapter("input"));
  h = h + time_.forward(g, g.constant(std::move(tf)), adapter("time"));
  h = h + cond_.forward(g, cond, adapter("cond"));
  h = nn::silu(h);
  for (std::size_t i = 0; i < hidden_.size(); ++i) {
    h = h + nn::silu(hidden_[i].forward(g, h, adapter("hidden" + std::to_string(i))));
  }
  return output_.forward(g, h, adapter("output"));
}

Tensor DenoiserModel::predict(const Tensor& x, int t, const Tensor& cond) const {
  Graph g(false);
  const int steps[1] = {t};
  Var out = forward(g, g.constant(x.reshaped({1, x.size()})), steps,
                    g.constant(cond.reshaped({1, cond.size()})));
  return out.value().reshaped(x.shape());
}

DenoiserModel lora_merge(const DenoiserModel& model, const nn::AdapterSet& adapters) {
  DenoiserModel merged = model;
  merged.detach_adapters();
  for (const auto& [name, a] : adapters) {
    nn::Linear& l = merged.layer(name);
    l.weight = nn::merged_weight(l, a);
  }
  return merged;
}

nn::AdapterSet make_adapters(const DenoiserModel& model, std::span<const std::string> layers,
                             std::size_t rank, double alpha, Rng& rng) {
  nn::AdapterSet out;
  for (const auto& name : layers) {
    const nn::Linear& l = model.layer(name);
    out.emplace(name, nn::make_lora_adapter(l.in_features(), l.out_features(), rank, alpha, rng));
  }
  return out;
}

}  // namespace unidiff

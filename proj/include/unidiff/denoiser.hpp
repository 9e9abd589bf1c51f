#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unidiff/autodiff.hpp"
#include "unidiff/layers.hpp"
#include "unidiff/rng.hpp"
#include "unidiff/tensor.hpp"

namespace unidiff {

// Conditioning request: a concept token plus an optional suffix token.
// An empty token selects the learned unconditional embedding.
struct Prompt {
  std::string token;
  std::string suffix;

  bool unconditional() const { return token.empty(); }
  friend bool operator==(const Prompt&, const Prompt&) = default;
};

// Learned embeddings for concept tokens and prompt suffixes. The condition for
// (token, suffix) is embed(token) + embed(suffix).
class ConceptTable {
 public:
  ConceptTable() = default;
  explicit ConceptTable(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }

  bool has_token(const std::string& name) const { return tokens_.count(name) > 0; }
  bool has_suffix(const std::string& name) const { return suffixes_.count(name) > 0; }
  const nn::Tensor& token(const std::string& name) const;
  nn::Tensor& token(const std::string& name);
  const nn::Tensor& suffix(const std::string& name) const;
  nn::Tensor& suffix(const std::string& name);
  void set_token(const std::string& name, nn::Tensor value);
  void set_suffix(const std::string& name, nn::Tensor value);

  std::vector<std::string> token_names() const;
  std::vector<std::string> suffix_names() const;
  const std::map<std::string, nn::Tensor>& tokens() const { return tokens_; }
  const std::map<std::string, nn::Tensor>& suffixes() const { return suffixes_; }

  friend bool operator==(const ConceptTable&, const ConceptTable&) = default;

 private:
  void check_dim(const nn::Tensor& v, const std::string& name) const;

  std::size_t dim_ = 0;
  std::map<std::string, nn::Tensor> tokens_;
  std::map<std::string, nn::Tensor> suffixes_;
};

struct DenoiserArch {
  std::size_t image_dim = 16 * 16 * 3;
  std::size_t hidden = 256;
  std::size_t depth = 3;  // hidden activations; depth-1 residual hidden layers
  std::size_t cond_dim = 32;
  std::size_t time_dim = 32;

  friend bool operator==(const DenoiserArch&, const DenoiserArch&) = default;
};

// Sinusoidal features of the step index, shape [time_dim].
std::vector<double> time_features(int t, std::size_t time_dim);

// Noise-prediction network eps(x_t, t, cond) over flattened images.
//
//   h0 = silu(W_in x + W_time phi(t) + W_cond c + b)
//   h_{i+1} = h_i + silu(W_i h_i + b_i)
//   eps = W_out h + b_out
//
// Low-rank adapters attach to layers by name ("input", "time", "cond",
// "hidden<i>", "output"); with none attached the forward pass is the base model.
class DenoiserModel {
 public:
  DenoiserModel() = default;
  explicit DenoiserModel(DenoiserArch arch);

  // Random trunk weights, zero output layer, random null embedding.
  void init(Rng& rng, bool zero_output = true);

  const DenoiserArch& arch() const { return arch_; }
  ConceptTable& concepts() { return concepts_; }
  const ConceptTable& concepts() const { return concepts_; }
  nn::Tensor& null_embed() { return null_embed_; }
  const nn::Tensor& null_embed() const { return null_embed_; }

  std::vector<std::string> layer_names() const;
  nn::Linear& layer(const std::string& name);
  const nn::Linear& layer(const std::string& name) const;

  // Named trunk tensors ("<layer>.weight" / "<layer>.bias") in a fixed order.
  std::vector<std::pair<std::string, nn::Tensor*>> trunk_parameters();
  std::vector<std::pair<std::string, const nn::Tensor*>> trunk_parameters() const;
  std::size_t trunk_parameter_count() const;

  void attach_adapters(nn::AdapterSet adapters);
  nn::AdapterSet detach_adapters();
  const nn::AdapterSet& adapters() const { return adapters_; }
  nn::AdapterSet& adapters() { return adapters_; }
  std::vector<nn::Tensor*> adapter_parameters();
  std::size_t adapter_parameter_count() const;

  // Condition vector for a prompt (class + suffix, or the null embedding).
  nn::Tensor condition(const Prompt& prompt) const;
  // [n x cond_dim] condition rows bound to the table/null parameters of g.
  nn::Var condition(nn::Graph& g, std::span<const Prompt> prompts) const;

  // x: [n x image_dim], t: n step indices (>= 1), cond: [n x cond_dim].
  nn::Var forward(nn::Graph& g, nn::Var x, std::span<const int> t, nn::Var cond) const;

  // Inference helper for a single flattened image and condition vector.
  nn::Tensor predict(const nn::Tensor& x, int t, const nn::Tensor& cond) const;

  friend bool operator==(const DenoiserModel&, const DenoiserModel&) = default;

 private:
  DenoiserArch arch_;
  nn::Linear input_, time_, cond_, output_;
  std::vector<nn::Linear> hidden_;
  ConceptTable concepts_;
  nn::Tensor null_embed_;
  nn::AdapterSet adapters_;
};

// Model with every attached (or given) adapter folded into its host weights.
DenoiserModel lora_merge(const DenoiserModel& model, const nn::AdapterSet& adapters);

// Fresh adapters for the named layers.
nn::AdapterSet make_adapters(const DenoiserModel& model, std::span<const std::string> layers,
                             std::size_t rank, double alpha, Rng& rng);

}  // namespace unidiff

#pragma once

#include <cstdint>
#include <array>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "unidiff/autodiff.hpp"
#include "unidiff/data.hpp"
#include "unidiff/layers.hpp"
#include "unidiff/rng.hpp"
#include "unidiff/tensor.hpp"

namespace unidiff {

enum class ClassifierSize { small, large };
enum class BatchMix { none, mixup, cutmix };

// MLP over flattened model-space images; SiLU hidden layers, linear head.
class Classifier {
 public:
  Classifier() = default;
  Classifier(std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t num_classes);

  void init(Rng& rng);
  std::size_t input_dim() const { return input_dim_; }
  std::size_t num_classes() const { return layers_.empty() ? 0 : layers_.back().out_features(); }
  std::size_t feature_dim() const;

  std::vector<nn::Linear>& layers() { return layers_; }
  const std::vector<nn::Linear>& layers() const { return layers_; }
  std::vector<nn::Tensor*> parameters();

  nn::Var logits(nn::Graph& g, nn::Var x) const;
  // Inference on [n x input_dim] rows.
  nn::Tensor logits(const nn::Tensor& x) const;
  nn::Tensor probabilities(const nn::Tensor& x) const;
  // Penultimate-layer activations.
  nn::Tensor features(const nn::Tensor& x) const;

  // Replaces the head with a fresh one for a different class count.
  void reset_head(std::size_t num_classes, Rng& rng);

  friend bool operator==(const Classifier&, const Classifier&) = default;

 private:
  std::size_t input_dim_ = 0;
  std::vector<nn::Linear> layers_;
};

std::vector<std::size_t> hidden_sizes(ClassifierSize size);

// Stacked [n x D] model-space rows for the given samples.
nn::Tensor stack_images(std::span<const LabeledSample* const> samples);
nn::Tensor stack_images(std::span<const LabeledSample> samples);

struct MixedBatch {
  nn::Tensor x;        // [n x D] model space
  nn::Tensor targets;  // [n x C] rows summing to 1
};

MixedBatch one_hot_batch(std::span<const LabeledSample* const> samples, std::size_t num_classes,
                         double label_smoothing = 0.0);

// Mixes each row with a random partner (a shuffled copy of the batch).
// lambda ~ Beta(alpha, alpha); `lambda_override` pins it for tests.
MixedBatch mixup_batch(const MixedBatch& batch, double alpha, Rng& rng,
                       std::optional<double> lambda_override = std::nullopt);
// Pastes a random box from the partner; target weight = kept area fraction.
// `box_override` = {y0, x0, h, w} pins the box for tests.
MixedBatch cutmix_batch(const MixedBatch& batch, const nn::Shape& image_shape, double alpha,
                        Rng& rng, std::optional<std::array<std::size_t, 4>> box_override = {});

struct ClassifierConfig {
  ClassifierSize size = ClassifierSize::small;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch = 32;
  int epochs = 30;
  double label_smoothing = 0.0;
  BatchMix mix = BatchMix::none;
  double mix_alpha = 1.0;
  std::uint64_t seed = 0;
  // Pretrained initialization; the head is replaced if the class count differs.
  const Classifier* init_from = nullptr;
};

// Training set for one epoch (lets utilization strategies vary it per epoch).
using EpochSource = std::function<std::vector<const LabeledSample*>(int epoch)>;

struct TrainLog {
  std::vector<double> epoch_loss;
};

struct TrainedClassifier {
  Classifier model;
  TrainLog log;
};

TrainedClassifier train_classifier(const EpochSource& source, std::size_t num_classes,
                                   const ClassifierConfig& cfg);
TrainedClassifier train_classifier(std::span<const LabeledSample> train, std::size_t num_classes,
                                   const ClassifierConfig& cfg);

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
  std::vector<double> per_class;  // accuracy per class (NaN-free: 0 for absent classes)
  std::vector<int> per_class_count;
};

// Scores [n x C]; k for top-5 is min(5, C).
EvalResult evaluate_scores(const nn::Tensor& scores, std::span<const int> labels);
EvalResult evaluate(const Classifier& model, std::span<const LabeledSample> test);

}  // namespace unidiff

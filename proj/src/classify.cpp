#include "unidiff/classify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "unidiff/errors.hpp"
#include "unidiff/optim.hpp"

namespace unidiff {

using nn::Graph;
using nn::Tensor;
using nn::Var;

Classifier::Classifier(std::size_t input_dim, std::vector<std::size_t> hidden,
                       std::size_t num_classes)
    : input_dim_(input_dim) {
  if (num_classes < 1) throw ParameterError("classifier needs at least one class");
  std::size_t in = input_dim;
  for (std::size_t h : hidden) {
    layers_.emplace_back(in, h);
    in = h;
  }
  layers_.emplace_back(in, num_classes);
}

void Classifier::init(Rng& rng) {
  for (auto& l : layers_) l.init_normal(rng);
}

std::size_t Classifier::feature_dim() const {
  return layers_.size() > 1 ? layers_[layers_.size() - 2].out_features() : input_dim_;
}

std::vector<Tensor*> Classifier::parameters() {
  std::vector<Tensor*> out;
  for (auto& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

Var Classifier::logits(Graph& g, Var x) const {
  Var h = x;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = nn::silu(layers_[i].forward(g, h));
  return layers_.back().forward(g, h);
}

Tensor Classifier::logits(const Tensor& x) const {
  Graph g(false);
  return logits(g, g.constant(x)).value();
}

Tensor Classifier::probabilities(const Tensor& x) const {
  Tensor p = logits(x);
  const std::size_t n = p.rows(), c = p.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = p.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) row[j] /= z;
  }
  return p;
}

Tensor Classifier::features(const Tensor& x) const {
  Graph g(false);
  Var h = g.constant(x);
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = nn::silu(layers_[i].forward(g, h));
  return h.value();
}

void Classifier::reset_head(std::size_t num_classes, Rng& rng) {
  nn::Linear head(feature_dim(), num_classes);
  head.init_normal(rng);
  layers_.back() = std::move(head);
}

std::vector<std::size_t> hidden_sizes(ClassifierSize size) {
  return size == ClassifierSize::small ? std::vector<std::size_t>{128}
                                       : std::vector<std::size_t>{256, 256};
}

Tensor stack_images(std::span<const LabeledSample* const> samples) {
  if (samples.empty()) return Tensor({0, 0});
  const std::size_t d = samples.front()->image.size();
  Tensor x({samples.size(), d});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor& img = samples[i]->image;
    if (img.size() != d) throw ShapeError("stack_images: mixed image sizes");
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = 2.0 * img[j] - 1.0;
  }
  return x;
}

Tensor stack_images(std::span<const LabeledSample> samples) {
  std::vector<const LabeledSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return stack_images(ptrs);
}

MixedBatch one_hot_batch(std::span<const LabeledSample* const> samples, std::size_t num_classes,
                         double label_smoothing) {
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw ParameterError("label smoothing must lie in [0, 1)");
  }
  MixedBatch b{stack_images(samples), Tensor({samples.size(), num_classes})};
  const double off = label_smoothing / static_cast<double>(num_classes);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int y = samples[i]->fine;
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ParameterError("label " + std::to_string(y) + " outside the class table (sample " +
                           samples[i]->id + ")");
    }
    for (std::size_t j = 0; j < num_classes; ++j) b.targets[i * num_classes + j] = off;
    b.targets[i * num_classes + static_cast<std::size_t>(y)] += 1.0 - label_smoothing;
  }
  return b;
}

namespace {

std::vector<std::size_t> partner_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  return perm;
}

void check_mix_args(const MixedBatch& batch, double alpha) {
  if (!(alpha > 0.0)) throw ParameterError("mixing alpha must be > 0");
  if (batch.x.rows() < 2) throw ParameterError("mixing needs a batch of at least 2");
}

}  // namespace

MixedBatch mixup_batch(const MixedBatch& batch, double alpha, Rng& rng,
                       std::optional<double> lambda_override) {
  check_mix_args(batch, alpha);
  const double lam = lambda_override ? *lambda_override : rng.beta(alpha, alpha);
  const auto perm = partner_order(batch.x.rows(), rng);
  MixedBatch out = batch;
  const std::size_t d = batch.x.cols(), c = batch.targets.cols();
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const std::size_t j = perm[i];
    for (std::size_t k = 0; k < d; ++k) {
      out.x[i * d + k] = lam * batch.x[i * d + k] + (1.0 - lam) * batch.x[j * d + k];
    }
    for (std::size_t k = 0; k < c; ++k) {
      out.targets[i * c + k] = lam * batch.targets[i * c + k] + (1.0 - lam) * batch.targets[j * c + k];
    }
  }
  return out;
}

MixedBatch cutmix_batch(const MixedBatch& batch, const nn::Shape& image_shape, double alpha,
                        Rng& rng, std::optional<std::array<std::size_t, 4>> box_override) {
  check_mix_args(batch, alpha);
  if (image_shape.size() != 3 || nn::shape_size(image_shape) != batch.x.cols()) {
    throw ShapeError("cutmix: image shape " + nn::shape_str(image_shape) + " does not match rows");
  }
  const std::size_t h = image_shape[0], w = image_shape[1], ch = image_shape[2];
  std::size_t y0, x0, bh, bw;
  if (box_override) {
    std::tie(y0, x0, bh, bw) = std::tuple((*box_override)[0], (*box_override)[1],
                                          (*box_override)[2], (*box_override)[3]);
    if (y0 + bh > h || x0 + bw > w) throw ParameterError("cutmix box outside the image");
  } else {
    const double lam = rng.beta(alpha, alpha);
    const double cut = std::sqrt(1.0 - lam);
    bh = static_cast<std::size_t>(std::floor(cut * static_cast<double>(h)));
    bw = static_cast<std::size_t>(std::floor(cut * static_cast<double>(w)));
    const std::size_t cy = rng.index(h), cx = rng.index(w);
    y0 = cy >= bh / 2 ? std::min(cy - bh / 2, h - bh) : 0;
    x0 = cx >= bw / 2 ? std::min(cx - bw / 2, w - bw) : 0;
  }
  const auto perm = partner_order(batch.x.rows(), rng);
  const double kept = 1.0 - static_cast<double>(bh * bw) / static_cast<double>(h * w);
  MixedBatch out = batch;
  const std::size_t d = batch.x.cols(), c = batch.targets.cols();
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const std::size_t j = perm[i];
    for (std::size_t y = y0; y < y0 + bh; ++y)
      for (std::size_t x = x0; x < x0 + bw; ++x)
        for (std::size_t k = 0; k < ch; ++k) {
          const std::size_t idx = (y * w + x) * ch + k;
          out.x[i * d + idx] = batch.x[j * d + idx];
        }
    for (std::size_t k = 0; k < c; ++k) {
      out.targets[i * c + k] = kept * batch.targets[i * c + k] + (1.0 - kept) * batch.targets[j * c + k];
    }
  }
  return out;
}

TrainedClassifier train_classifier(const EpochSource& source, std::size_t num_classes,
                                   const ClassifierConfig& cfg) {
  if (cfg.epochs < 1 || cfg.batch < 1) throw ParameterError("classifier epochs and batch must be >= 1");
  if (!(cfg.label_smoothing >= 0.0 && cfg.label_smoothing < 1.0)) {
    throw ParameterError("label smoothing must lie in [0, 1)");
  }
  Rng rng(derive_seed(cfg.seed, "classifier"));
  TrainedClassifier out;
  std::vector<const LabeledSample*> first = source(0);
  if (first.empty()) throw ParameterError("classifier training set is empty");
  const std::size_t d = first.front()->image.size();
  const nn::Shape image_shape = first.front()->image.shape();

  if (cfg.init_from) {
    out.model = *cfg.init_from;
    if (out.model.input_dim() != d) throw ParameterError("pretrained classifier input size differs");
    if (out.model.num_classes() != num_classes) out.model.reset_head(num_classes, rng);
  } else {
    out.model = Classifier(d, hidden_sizes(cfg.size), num_classes);
    out.model.init(rng);
  }
  auto opt = nn::make_sgd(cfg.lr, cfg.momentum, cfg.weight_decay);
  auto params = out.model.parameters();
  std::vector<const Tensor*> cparams(params.begin(), params.end());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<const LabeledSample*> items = epoch == 0 ? std::move(first) : source(epoch);
    if (items.empty()) throw ParameterError("classifier training set is empty");
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.index(i)]);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(items.size(), start + static_cast<std::size_t>(cfg.batch));
      std::span<const LabeledSample* const> chunk(items.data() + start, end - start);
      MixedBatch mb = one_hot_batch(chunk, num_classes, cfg.label_smoothing);
      if (cfg.mix != BatchMix::none && chunk.size() >= 2) {
        mb = cfg.mix == BatchMix::mixup ? mixup_batch(mb, cfg.mix_alpha, rng)
                                        : cutmix_batch(mb, image_shape, cfg.mix_alpha, rng);
      }
      Graph g;
      Var loss = nn::soft_cross_entropy(out.model.logits(g, g.constant(std::move(mb.x))), mb.targets);
      total += loss.value()[0];
      ++batches;
      auto grads = nn::grad(g, loss, cparams);
      nn::optimizer_step(opt, params, grads);
    }
    out.log.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  return out;
}

TrainedClassifier train_classifier(std::span<const LabeledSample> train, std::size_t num_classes,
                                   const ClassifierConfig& cfg) {
  std::vector<const LabeledSample*> ptrs;
  for (const auto& s : train) ptrs.push_back(&s);
  return train_classifier([&](int) { return ptrs; }, num_classes, cfg);
}

EvalResult evaluate_scores(const Tensor& scores, std::span<const int> labels) {
  const std::size_t n = labels.size();
  if (n == 0) throw ParameterError("evaluation set is empty");
  if (scores.rank() != 2 || scores.rows() != n) throw ShapeError("evaluate: scores/labels mismatch");
  const std::size_t c = scores.cols();
  const std::size_t k = std::min<std::size_t>(5, c);
  EvalResult r;
  r.per_class.assign(c, 0.0);
  r.per_class_count.assign(c, 0);
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ParameterError("unknown label " + std::to_string(y) + " in evaluation set");
    }
    const double* row = scores.data() + i * c;
    const double sy = row[y];
    // Rank of the true class; ties count against it so a constant scorer is not rewarded.
    std::size_t above = 0;
    for (std::size_t j = 0; j < c; ++j)
      if (static_cast<int>(j) != y && row[j] >= sy) ++above;
    const auto yc = static_cast<std::size_t>(y);
    ++r.per_class_count[yc];
    if (above == 0) {
      ++hit1;
      r.per_class[yc] += 1.0;
    }
    if (above < k) ++hit5;
  }
  for (std::size_t j = 0; j < c; ++j)
    if (r.per_class_count[j] > 0) r.per_class[j] /= r.per_class_count[j];
  r.top1 = static_cast<double>(hit1) / static_cast<double>(n);
  r.top5 = static_cast<double>(hit5) / static_cast<double>(n);
  return r;
}

EvalResult evaluate(const Classifier& model, std::span<const LabeledSample> test) {
  if (test.empty()) throw ParameterError("evaluation set is empty");
  std::vector<int> labels;
  for (const auto& s : test) labels.push_back(s.fine);
  return evaluate_scores(model.logits(stack_images(test)), labels);
}

}  // namespace unidiff

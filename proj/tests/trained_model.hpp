#pragma once

#include <memory>
#include <string>

#include "unidiff/checkpoint.hpp"
#include "unidiff/config.hpp"
#include "unidiff/diffusion.hpp"
#include "unidiff/experiment.hpp"
#include "unidiff/generate.hpp"

namespace testutil {

// Mean absolute model-space error of sample(ddim_invert(x)) on the default
// backbone: 50 test images, full 25-step chain, default refinement,
// conditional prompt, w = 1. Calibration measured 0.0067 (worst image 0.0086).
inline constexpr double kInversionRoundTripBound = 0.01;

// Config overrides that route the expensive artifacts through the shared test cache.
inline unidiff::Json cached_config(unidiff::Json overrides = unidiff::Json::object()) {
  overrides["cache_dir"] = UNIDIFF_TEST_CACHE;
  return overrides;
}

// The default backbone plus a task dataset, wired into a generation context
// that prompts every class with its shape family (the untuned path).
struct TrainedRig {
  std::shared_ptr<const unidiff::Checkpoint> ckpt;
  unidiff::DatasetManifest data;
  std::unique_ptr<unidiff::ModelPredictor> predictor;
  unidiff::GenerationContext ctx;

  explicit TrainedRig(const std::string& task) {
    const unidiff::Json cfg = cached_config({{"dataset", {{"task", task}}}});
    ckpt = unidiff::backbone_checkpoint(cfg);
    data = unidiff::task_dataset_for(cfg);
    predictor = std::make_unique<unidiff::ModelPredictor>(ckpt->model, ckpt->schedule);
    ctx.predictor = predictor.get();
    ctx.model = &ckpt->model;
    ctx.schedule = &ckpt->schedule;
    ctx.hierarchy = &data.hierarchy;
    for (std::size_t c = 0; c < data.hierarchy.num_fine(); ++c) {
      ctx.tokens.push_back(data.hierarchy.coarse_names[static_cast<std::size_t>(
          data.hierarchy.fine_to_coarse[c])]);
    }
    unidiff::set_default_vocabulary(ctx, data.train);
  }
};

inline const TrainedRig& fine_rig() {
  static const TrainedRig rig("fine");
  return rig;
}

inline const TrainedRig& coarse_rig() {
  static const TrainedRig rig("coarse");
  return rig;
}

}  // namespace testutil

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aligndistill/expert_synth.hpp"
#include "aligndistill/gradients.hpp"
#include "aligndistill/losses.hpp"
#include "aligndistill/toy_model.hpp"

namespace aligndistill {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamState {
 public:
  void apply(ParamSet& params, const ParamSet& grads, const AdamConfig& config);
  std::size_t steps() const { return step_; }

 private:
  ParamSet first_;
  ParamSet second_;
  std::size_t step_ = 0;
};

struct TrainOptions {
  DistillationWeights weights{};
  std::vector<std::size_t> distill_layers{3};  // losses are summed over these layers
  bool rotation_in_forward = true;
  // Substitute the zero-padded interpolated expert features for the visual
  // states entering the distill layer; the alignment losses are not trained.
  bool direct_replacement = false;
};

struct LossReport {
  double l_llm = 0.0;
  double l_vis = 0.0;
  double l_att = 0.0;
  double combined = 0.0;
};

std::string rotation_key(std::size_t layer);

// Trainable set: every adapter factor, plus one rotation per distill layer
// when the similarity loss is active (alpha > 0).
ParamSet init_trainables(const ToyTransformer& model, std::size_t rank, std::uint64_t seed, const TrainOptions& options);

struct ObjectiveResult {
  LossReport loss;
  ParamSet grads;  // same keys as the trainable set; empty unless requested
};

// Batch mean of L_LLM + alpha·L_vis + beta·L_att. Terms with zero weight are
// still measured but stay out of the differentiated graph.
ObjectiveResult evaluate_objective(const ToyTransformer& model, const ParamSet& phi,
                                   std::span<const TokenSequence> batch, std::span<const DistillTarget> targets,
                                   const TrainOptions& options, bool with_gradient);

struct TrainState {
  ParamSet phi;
  AdamState optimizer;
};

// One Adam step on phi. Throws TrainingError on a non-finite loss without
// touching the state.
LossReport train_step(const ToyTransformer& model, TrainState& state, std::span<const TokenSequence> batch,
                      std::span<const DistillTarget> targets, const TrainOptions& options, const AdamConfig& adam);

// Adapter factors of phi as AdapterParams.
AdapterParams adapters_of(const ParamSet& phi);

// Zero-padded N × width rows from interpolated expert features.
Tensor lift_features(const FeatureGrid& features, std::size_t width);

// Hooks the forward pass needs for evaluation with a trained phi.
std::vector<LayerHook> eval_hooks(const ParamSet& phi, const DistillTarget* target, std::size_t width,
                                  const TrainOptions& options);

}  // namespace aligndistill

#include "aligndistill/training.hpp"

#include <cmath>
#include <stdexcept>

#include "aligndistill/errors.hpp"
#include "aligndistill/tape.hpp"

namespace aligndistill {

void AdamState::apply(ParamSet& params, const ParamSet& grads, const AdamConfig& config) {
  ++step_;
  const double correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(step_));
  const double correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(step_));
  for (auto& [name, value] : params) {
    const auto g_it = grads.find(name);
    if (g_it == grads.end()) throw std::invalid_argument("adam: missing gradient for " + name);
    const Tensor& g = g_it->second;
    auto [m_it, m_new] = first_.try_emplace(name, Tensor(value.dims()));
    auto [v_it, v_new] = second_.try_emplace(name, Tensor(value.dims()));
    Tensor& m = m_it->second;
    Tensor& v = v_it->second;
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      value[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

std::string rotation_key(std::size_t layer) { return "rotation.layer" + std::to_string(layer); }

ParamSet init_trainables(const ToyTransformer& model, std::size_t rank, std::uint64_t seed, const TrainOptions& options) {
  ParamSet phi = AdapterParams::init(model, rank, seed).tensors;
  if (options.weights.alpha > 0.0 && !options.direct_replacement) {
    for (std::size_t layer : options.distill_layers)
      phi[rotation_key(layer)] = RotationParams::zeros(model.config().width).w;
  }
  return phi;
}

AdapterParams adapters_of(const ParamSet& phi) {
  AdapterParams out;
  for (const auto& [name, t] : phi) {
    if (name.rfind("layer", 0) != 0) continue;
    out.tensors.emplace(name, t);
    if (name.back() == 'A') out.rank = t.cols();
  }
  return out;
}

Tensor lift_features(const FeatureGrid& features, std::size_t width) {
  if (features.channels() > width)
    throw std::invalid_argument("lift_features: expert channels exceed the model width");
  Tensor out = Tensor::matrix(features.tokens(), width);
  for (std::size_t t = 0; t < features.tokens(); ++t) {
    const auto src = features.token(t);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

std::vector<LayerHook> eval_hooks(const ParamSet& phi, const DistillTarget* target, std::size_t width,
                                  const TrainOptions& options) {
  std::vector<LayerHook> hooks;
  for (std::size_t layer : options.distill_layers) {
    LayerHook hook;
    hook.layer = layer;
    hook.rotate_in_forward = options.rotation_in_forward;
    if (options.direct_replacement) {
      if (!target) throw std::invalid_argument("eval_hooks: direct replacement needs the expert target");
      hook.replacement = lift_features(target->features, width);
    } else if (const auto it = phi.find(rotation_key(layer)); it != phi.end()) {
      hook.rotation_value = it->second;
    } else {
      continue;
    }
    hooks.push_back(std::move(hook));
  }
  return hooks;
}

namespace {

struct ExampleLoss {
  LossReport loss;
  ParamSet grads;
};

ExampleLoss example_objective(const ToyTransformer& model, const ParamSet& phi, const TokenSequence& seq,
                              const DistillTarget& target, const TrainOptions& options, bool with_gradient) {
  const DistillationWeights& w = options.weights;
  const bool train_vis = w.alpha > 0.0 && !options.direct_replacement;
  const bool train_att = w.beta > 0.0 && !options.direct_replacement;

  Tape tape;
  std::map<std::string, Var> vars;
  for (const auto& [name, t] : phi) vars.emplace(name, with_gradient ? tape.parameter(t) : tape.constant(t));
  AdapterVars adapter_vars;
  for (const auto& [name, v] : vars)
    if (name.rfind("layer", 0) == 0) adapter_vars.emplace(name, v);

  std::vector<LayerHook> hooks;
  for (std::size_t layer : options.distill_layers) {
    LayerHook hook;
    hook.layer = layer;
    hook.rotate_in_forward = options.rotation_in_forward;
    if (options.direct_replacement) {
      hook.replacement = lift_features(target.features, model.config().width);
    } else if (const auto it = vars.find(rotation_key(layer)); it != vars.end()) {
      hook.rotation = it->second;
    } else {
      continue;
    }
    hooks.push_back(std::move(hook));
  }

  const TapeTrace trace = build_forward(tape, model, &adapter_vars, seq, hooks);
  Var objective = ops::cross_entropy(trace.logits, seq.targets);

  ExampleLoss out;
  out.loss.l_llm = objective.value()[0];
  for (std::size_t layer : options.distill_layers) {
    const std::size_t idx = layer - 1;
    // Features the similarity loss sees: rotated states when a rotation is
    // trained, the substituted expert rows in direct mode, raw states otherwise.
    Var states = trace.rotated[idx].valid() ? trace.rotated[idx] : trace.visual_input[idx];
    if (options.direct_replacement) states = tape.constant(lift_features(target.features, model.config().width));
    Var heads = ops::mean_rows(trace.attention[idx]);

    if (train_vis) {
      Var l_vis = ops::mse_to(ops::cosine_similarity(states), target.similarity.s);
      out.loss.l_vis += l_vis.value()[0];
      objective = ops::add(objective, ops::scale(l_vis, w.alpha));
    } else {
      out.loss.l_vis += visual_alignment_loss(target.similarity, similarity_matrix(states.value()));
    }
    if (train_att) {
      Var l_att = ops::softmax_kl(target.attention.scores, heads);
      out.loss.l_att += l_att.value()[0];
      objective = ops::add(objective, ops::scale(l_att, w.beta));
    } else {
      out.loss.l_att += attention_alignment_loss(target.attention, AttentionVector{heads.value().values(), false});
    }
  }
  out.loss.combined = objective.value()[0];

  if (with_gradient) {
    tape.backward(objective);
    for (const auto& [name, v] : vars) {
      const Tensor& g = v.grad();
      out.grads.emplace(name, g.empty() ? Tensor(v.value().dims()) : g);
    }
  }
  return out;
}

}  // namespace

ObjectiveResult evaluate_objective(const ToyTransformer& model, const ParamSet& phi,
                                   std::span<const TokenSequence> batch, std::span<const DistillTarget> targets,
                                   const TrainOptions& options, bool with_gradient) {
  if (batch.size() != targets.size()) throw std::invalid_argument("evaluate_objective: batch and targets differ in length");
  if (batch.empty()) throw std::invalid_argument("evaluate_objective: empty batch");
  options.weights.validate();
  for (std::size_t layer : options.distill_layers)
    if (layer < 1 || layer > model.config().layers) throw std::invalid_argument("distill layer out of range");

  ObjectiveResult result;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ExampleLoss ex = example_objective(model, phi, batch[i], targets[i], options, with_gradient);
    result.loss.l_llm += ex.loss.l_llm * inv;
    result.loss.l_vis += ex.loss.l_vis * inv;
    result.loss.l_att += ex.loss.l_att * inv;
    result.loss.combined += ex.loss.combined * inv;
    if (!with_gradient) continue;
    for (auto& [name, g] : ex.grads) {
      auto [it, inserted] = result.grads.try_emplace(name, Tensor(g.dims()));
      add_inplace(it->second, g, inv);
    }
  }
  return result;
}

LossReport train_step(const ToyTransformer& model, TrainState& state, std::span<const TokenSequence> batch,
                      std::span<const DistillTarget> targets, const TrainOptions& options, const AdamConfig& adam) {
  ObjectiveResult r = evaluate_objective(model, state.phi, batch, targets, options, true);
  const LossReport& l = r.loss;
  if (!std::isfinite(l.combined) || !std::isfinite(l.l_llm) || !std::isfinite(l.l_vis) || !std::isfinite(l.l_att))
    throw TrainingError("non-finite loss: l_llm=" + std::to_string(l.l_llm) + " l_vis=" + std::to_string(l.l_vis) +
                        " l_att=" + std::to_string(l.l_att));
  for (const auto& [name, g] : r.grads)
    if (!g.all_finite()) throw TrainingError("non-finite gradient for " + name);
  state.optimizer.apply(state.phi, r.grads, adam);
  return l;
}

}  // namespace aligndistill

#include "aligndistill/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "aligndistill/errors.hpp"
#include "aligndistill/io.hpp"
#include "aligndistill/rng.hpp"

namespace aligndistill {

namespace {

constexpr std::size_t kHeatmapExamples = 4;

std::string steps_header() { return "step,l_llm,l_vis,l_att,combined\n"; }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<double> softmaxed(const AttentionVector& att) {
  if (att.normalized) return att.scores;
  return softmax(att.scores);
}

struct Split {
  std::vector<Example> examples;
  std::vector<TokenSequence> sequences;
  std::vector<DistillTarget> targets;
};

Split make_split(std::uint64_t seed, std::size_t count, const DatasetConfig& dc) {
  Split s;
  s.examples = make_dataset(seed, count, dc);
  for (const Example& ex : s.examples) {
    s.sequences.push_back(ex.sequence);
    s.targets.push_back(make_distill_target(ex.expert, dc.student_grid));
  }
  return s;
}

DatasetConfig run_dataset_config(const ExperimentConfig& cfg, const RunSeeds& seeds) {
  DatasetConfig dc = cfg.dataset_config();
  dc.world_seed = seeds.world;
  return dc;
}

int predicted_label(const Tensor& logits) {
  int best = 0;
  for (int j = 1; j < Vocabulary::kLabelCount; ++j)
    if (logits(0, Vocabulary::label_token(j)) > logits(0, Vocabulary::label_token(best))) best = j;
  return best;
}

void write_outputs(const ExperimentConfig& cfg, const MetricsReport& report, const ParamSet& phi,
                   const ToyTransformer& model, const Split& eval, const TrainOptions& options) {
  namespace fs = std::filesystem;
  const fs::path root(cfg.output_dir);
  fs::create_directories(root / "heatmaps");
  fs::create_directories(root / "checkpoint");

  write_text(root / "metrics.csv", format_metrics_csv(report));

  nlohmann::json summary;
  summary["config"] = to_json(cfg);
  summary["config_hash"] = hash_hex(report.config_hash);
  summary["seed"] = report.seed;
  summary["base_checksum"] = hash_hex(report.base_checksum);
  summary["wall_seconds"] = report.wall_seconds;
  summary["final"] = {{"eval_lm_loss", report.final.eval_lm_loss},
                      {"eval_accuracy", report.final.eval_accuracy},
                      {"attention_kl", report.final.attention_kl},
                      {"similarity_mse", report.final.similarity_mse},
                      {"attention_overlap", report.final.attention_overlap}};
  write_text(root / "summary.json", summary.dump(2) + "\n");

  for (const auto& [name, t] : phi) write_tgrid(root / "checkpoint" / (name + ".tgrid"), t);

  const AdapterParams adapters = adapters_of(phi);
  const std::size_t layer = options.distill_layers.front();
  std::size_t written = 0;
  for (std::size_t i = 0; i < eval.examples.size() && written < kHeatmapExamples; ++i) {
    const Example& ex = eval.examples[i];
    if (!ex.expert.query_present) continue;
    const auto hooks = eval_hooks(phi, &eval.targets[i], model.config().width, options);
    const ForwardTrace trace = forward(model, &adapters, ex.sequence, hooks);
    const AttentionVector student = average_heads(extract_visual_attention(trace, layer));
    const std::string stem = "eval" + std::to_string(i);
    emit_heatmap(softmaxed(student), cfg.student_grid, root / "heatmaps" / (stem + "_student.pgm"));
    emit_heatmap(softmaxed(eval.targets[i].attention), cfg.student_grid, root / "heatmaps" / (stem + "_teacher.pgm"));
    emit_heatmap(softmaxed(ex.expert.attention), ex.expert.scene.shape, root / "heatmaps" / (stem + "_expert.pgm"));
    ++written;
  }
}

}  // namespace

RunSeeds RunSeeds::from(std::uint64_t seed) {
  return RunSeeds{derive_seed(seed, 1), derive_seed(seed, 2), derive_seed(seed, 3),
                  derive_seed(seed, 4), derive_seed(seed, 5), derive_seed(seed, 6)};
}

std::string format_metrics_csv(const MetricsReport& report) {
  std::ostringstream out;
  out << steps_header();
  for (std::size_t i = 0; i < report.steps.size(); ++i) {
    const LossReport& s = report.steps[i];
    out << i << ',' << format_double(s.l_llm) << ',' << format_double(s.l_vis) << ',' << format_double(s.l_att) << ','
        << format_double(s.combined) << '\n';
  }
  const FinalMetrics& f = report.final;
  out << "final,eval_lm_loss," << format_double(f.eval_lm_loss) << '\n';
  out << "final,eval_accuracy," << format_double(f.eval_accuracy) << '\n';
  out << "final,attention_kl," << format_double(f.attention_kl) << '\n';
  out << "final,similarity_mse," << format_double(f.similarity_mse) << '\n';
  out << "final,attention_overlap," << format_double(f.attention_overlap) << '\n';
  out << "final,config_hash," << hash_hex(report.config_hash) << '\n';
  out << "final,seed," << report.seed << '\n';
  return out.str();
}

std::vector<std::size_t> project_region(const PlantedScene& scene, int query, GridShape student) {
  std::vector<std::size_t> cells;
  for (std::size_t r = 0; r < student.h; ++r) {
    const std::size_t er = std::min(scene.shape.h - 1, (2 * r + 1) * scene.shape.h / (2 * student.h));
    for (std::size_t c = 0; c < student.w; ++c) {
      const std::size_t ec = std::min(scene.shape.w - 1, (2 * c + 1) * scene.shape.w / (2 * student.w));
      if (scene.labels[er * scene.shape.w + ec] == query) cells.push_back(r * student.w + c);
    }
  }
  return cells;
}

double attention_overlap(const AttentionVector& att, const PlantedScene& scene, int query, GridShape student) {
  if (att.size() != student.tokens()) throw std::invalid_argument("attention_overlap: attention length does not match the grid");
  const auto cells = project_region(scene, query, student);
  if (cells.empty()) throw std::invalid_argument("attention_overlap: region of entity " + std::to_string(query) + " is empty on the student grid");
  const std::vector<double> p = softmaxed(att);
  double mass = 0.0;
  for (std::size_t c : cells) mass += p[c];
  return std::clamp(mass, 0.0, 1.0);
}

MetricsReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const RunSeeds seeds = RunSeeds::from(cfg.seed);
  const TrainOptions options = cfg.train_options();
  const DatasetConfig dc = run_dataset_config(cfg, seeds);

  const ToyTransformer model(cfg.model_config(), seeds.model);
  const Split train = make_split(seeds.train, cfg.train_count, dc);
  const Split eval = make_split(seeds.eval, cfg.eval_count, dc);

  MetricsReport report;
  report.config_hash = config_hash(cfg);
  report.seed = cfg.seed;
  report.mode = cfg.mode;
  report.base_checksum = model.checksum();

  TrainState state{init_trainables(model, cfg.adapter_rank, seeds.adapters, options), {}};
  AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;

  // Batches walk reshuffled epochs of the training split.
  SeededRng order(seeds.batches);
  std::vector<std::size_t> perm(train.examples.size());
  std::size_t cursor = perm.size();
  std::vector<TokenSequence> batch;
  std::vector<DistillTarget> batch_targets;
  report.steps.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    batch.clear();
    batch_targets.clear();
    while (batch.size() < cfg.batch_size) {
      if (cursor == perm.size()) {
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[order.below(i)]);
        cursor = 0;
      }
      const std::size_t idx = perm[cursor++];
      batch.push_back(train.sequences[idx]);
      batch_targets.push_back(train.targets[idx]);
    }
    try {
      report.steps.push_back(train_step(model, state, batch, batch_targets, options, adam));
    } catch (const TrainingError& e) {
      throw TrainingError("step " + std::to_string(step) + ": " + e.what());
    }
  }

  if (model.checksum() != report.base_checksum) throw TrainingError("frozen base parameters changed during training");

  // Held-out evaluation.
  const AdapterParams adapters = adapters_of(state.phi);
  const std::size_t layer = options.distill_layers.front();
  FinalMetrics& f = report.final;
  std::size_t correct = 0;
  std::size_t present = 0;
  for (std::size_t i = 0; i < eval.examples.size(); ++i) {
    const Example& ex = eval.examples[i];
    const ObjectiveResult r = evaluate_objective(model, state.phi, std::span(&eval.sequences[i], 1),
                                                 std::span(&eval.targets[i], 1), options, false);
    f.eval_lm_loss += r.loss.l_llm;
    f.similarity_mse += r.loss.l_vis;
    f.attention_kl += r.loss.l_att;

    const auto hooks = eval_hooks(state.phi, &eval.targets[i], model.config().width, options);
    const ForwardTrace trace = forward(model, &adapters, ex.sequence, hooks);
    if (Vocabulary::label_token(predicted_label(trace.logits)) == ex.sequence.targets.front()) ++correct;
    if (ex.expert.query_present) {
      const AttentionVector student = average_heads(extract_visual_attention(trace, layer));
      f.attention_overlap += attention_overlap(student, ex.expert.scene, ex.expert.query, cfg.student_grid);
      ++present;
    }
  }
  const double n = static_cast<double>(eval.examples.size());
  f.eval_lm_loss /= n;
  f.similarity_mse /= n;
  f.attention_kl /= n;
  f.eval_accuracy = static_cast<double>(correct) / n;
  f.attention_overlap = present ? f.attention_overlap / static_cast<double>(present) : 0.0;

  for (double v : {f.eval_lm_loss, f.similarity_mse, f.attention_kl, f.attention_overlap})
    if (!std::isfinite(v)) throw TrainingError("non-finite evaluation metric");

  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!cfg.output_dir.empty()) write_outputs(cfg, report, state.phi, model, eval, options);
  return report;
}

std::vector<AblationResult> ablation(const ExperimentConfig& cfg) {
  std::vector<AblationResult> out;
  for (Mode m : kAllModes) {
    ExperimentConfig arm = cfg;
    arm.mode = m;
    if (!cfg.output_dir.empty()) arm.output_dir = (std::filesystem::path(cfg.output_dir) / mode_name(m)).string();
    out.push_back({m, run_experiment(arm)});
  }
  return out;
}

std::string format_sweep_csv(const std::vector<SweepResult>& results) {
  std::ostringstream out;
  out << "layer,eval_lm_loss,eval_accuracy,attention_kl,similarity_mse,attention_overlap,config_hash,seed\n";
  for (const SweepResult& r : results) {
    const FinalMetrics& f = r.report.final;
    out << r.layer << ',' << format_double(f.eval_lm_loss) << ',' << format_double(f.eval_accuracy) << ','
        << format_double(f.attention_kl) << ',' << format_double(f.similarity_mse) << ','
        << format_double(f.attention_overlap) << ',' << hash_hex(r.report.config_hash) << ',' << r.report.seed
        << '\n';
  }
  return out.str();
}

std::vector<SweepResult> layer_sweep(const ExperimentConfig& cfg, const std::vector<std::size_t>& layers) {
  if (layers.empty()) throw ConfigError("layer sweep needs at least one layer");
  for (std::size_t l : layers)
    if (l < 1 || l > cfg.layers) throw ConfigError("sweep layer " + std::to_string(l) + " outside 1.." + std::to_string(cfg.layers));
  std::vector<SweepResult> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    ExperimentConfig run = cfg;
    run.distill_layer = layers[i];
    run.extra_distill_layers.clear();
    if (!cfg.output_dir.empty())
      run.output_dir = (std::filesystem::path(cfg.output_dir) / ("run" + std::to_string(i) + "_layer" + std::to_string(layers[i]))).string();
    out.push_back({layers[i], run_experiment(run)});
  }
  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    write_text(std::filesystem::path(cfg.output_dir) / "layer_sweep.csv", format_sweep_csv(out));
  }
  return out;
}

ExperimentConfig small_grad_check_config() {
  ExperimentConfig c;
  c.layers = 2;
  c.heads = 2;
  c.width = 6;
  c.mlp_hidden = 12;
  c.vocab = 24;
  c.adapter_rank = 2;
  c.distill_layer = 2;
  c.student_grid = {3, 3};
  c.expert_grid = {6, 6};
  c.expert_channels = 4;
  c.entities_per_scene = 2;
  c.entity_types = 3;
  c.train_count = 2;
  c.eval_count = 2;
  c.steps = 0;
  return c;
}

FiniteDiffReport grad_check_command(const ExperimentConfig& cfg, const GradCheckOptions& options) {
  if (cfg.student_grid.tokens() > 16 || cfg.layers > 2)
    throw ConfigError("grad-check runs finite differences over every parameter; use at most 16 visual tokens "
                      "and 2 layers (got N=" + std::to_string(cfg.student_grid.tokens()) + ", L=" +
                      std::to_string(cfg.layers) + "), e.g. student_grid [3,3] and layers 2");
  cfg.validate();
  const RunSeeds seeds = RunSeeds::from(cfg.seed);
  const TrainOptions train_options = cfg.train_options();
  const DatasetConfig dc = run_dataset_config(cfg, seeds);
  const ToyTransformer model(cfg.model_config(), seeds.model);
  const Split data = make_split(seeds.train, options.examples, dc);

  ParamSet phi = init_trainables(model, cfg.adapter_rank, seeds.adapters, train_options);
  // Zero B factors and W would leave the A gradients identically zero; at a
  // small scale they leave them near the finite-difference noise floor.
  SeededRng rng(derive_seed(seeds.adapters, 0x9c));
  for (auto& [name, t] : phi)
    if (name.back() != 'A')
      for (double& v : t.data()) v = 0.5 * rng.normal();

  const Objective objective = [&](const ParamSet& p) {
    return evaluate_objective(model, p, data.sequences, data.targets, train_options, false).loss.combined;
  };
  ParamSet analytic = evaluate_objective(model, phi, data.sequences, data.targets, train_options, true).grads;
  if (!options.corrupt_param.empty()) {
    const auto it = analytic.find(options.corrupt_param);
    if (it == analytic.end()) throw std::invalid_argument("grad-check: no parameter named " + options.corrupt_param);
    it->second[0] += 1e-3 + std::abs(it->second[0]);
  }
  FiniteDiffReport report = finite_difference_check(objective, phi, analytic, options.epsilon, options.tolerance);

  if (!cfg.output_dir.empty()) {
    nlohmann::json j;
    j["pass"] = report.pass;
    j["epsilon"] = report.epsilon;
    j["tolerance"] = report.tolerance;
    j["max_rel_error"] = report.max_rel_error;
    j["failure"] = report.failure;
    j["config_hash"] = hash_hex(config_hash(cfg));
    for (const FiniteDiffEntry& e : report.params)
      j["params"][e.name] = {{"max_rel_error", e.max_rel_error}, {"worst_index", e.worst_index},
                             {"analytic", e.analytic}, {"numeric", e.numeric}, {"pass", e.pass}};
    std::filesystem::create_directories(cfg.output_dir);
    write_text(std::filesystem::path(cfg.output_dir) / "grad_check.json", j.dump(2) + "\n");
  }
  return report;
}

}  // namespace aligndistill

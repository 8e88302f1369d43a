#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aligndistill/config.hpp"
#include "aligndistill/expert_synth.hpp"
#include "aligndistill/finite_diff.hpp"
#include "aligndistill/training.hpp"

namespace aligndistill {

struct FinalMetrics {
  double eval_lm_loss = 0.0;
  double eval_accuracy = 0.0;      // fraction of eval examples whose best label token is the target
  double attention_kl = 0.0;       // mean KL(teacher || student) at the distill layer
  double similarity_mse = 0.0;     // mean L_vis against the expert similarity matrix
  double attention_overlap = 0.0;  // mean in-region mass, present queries only
};

struct MetricsReport {
  std::vector<LossReport> steps;
  FinalMetrics final;
  double wall_seconds = 0.0;  // kept out of the CSV so reruns compare byte for byte
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::uint64_t base_checksum = 0;
  Mode mode = Mode::full;
};

// Byte-stable CSV: per-step rows, then `final,<key>,<value>` rows.
std::string format_metrics_csv(const MetricsReport& report);

// Post-softmax mass of `att` (raw unless att.normalized) on the student cells
// whose nearest expert cell carries `query`. Throws std::invalid_argument when
// the projected region is empty or the lengths disagree.
double attention_overlap(const AttentionVector& att, const PlantedScene& scene, int query, GridShape student);
// Student cells (row-major) covered by `query` after nearest-cell projection.
std::vector<std::size_t> project_region(const PlantedScene& scene, int query, GridShape student);

// Seeds of the independent random streams of one run.
struct RunSeeds {
  std::uint64_t model, adapters, world, train, eval, batches;
  static RunSeeds from(std::uint64_t seed);
};

// Trains per cfg.mode and evaluates on a held-out split. Writes metrics.csv,
// summary.json, heatmaps/ and checkpoint/ under cfg.output_dir when it is
// non-empty. Throws TrainingError naming the step on a non-finite loss.
MetricsReport run_experiment(const ExperimentConfig& cfg);

struct AblationResult {
  Mode mode;
  MetricsReport report;
};

// All five modes with the same seed; each writes to <output_dir>/<mode>.
std::vector<AblationResult> ablation(const ExperimentConfig& cfg);

struct SweepResult {
  std::size_t layer;
  MetricsReport report;
};

// One run per entry of `layers` (duplicates allowed). Writes layer_sweep.csv
// under cfg.output_dir when it is non-empty.
std::vector<SweepResult> layer_sweep(const ExperimentConfig& cfg, const std::vector<std::size_t>& layers);
std::string format_sweep_csv(const std::vector<SweepResult>& results);

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  std::size_t examples = 2;
  // Test hook: added to the first analytic entry of this parameter.
  std::string corrupt_param;
};

// The configuration grad-check uses when none is given: two layers, 3×3 grid.
ExperimentConfig small_grad_check_config();

// Finite-difference check of the full training objective on a small
// instance. Adapters B and the rotation start from random values so every
// gradient path is live. Refuses N > 16 or L > 2 with a ConfigError. Writes
// grad_check.json under cfg.output_dir when it is non-empty.
FiniteDiffReport grad_check_command(const ExperimentConfig& cfg, const GradCheckOptions& options = {});

}  // namespace aligndistill

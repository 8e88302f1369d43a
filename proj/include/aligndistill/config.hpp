#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "aligndistill/expert_synth.hpp"
#include "aligndistill/toy_model.hpp"
#include "aligndistill/training.hpp"

namespace aligndistill {

// Ablation arms.
//   full              L_LLM + alpha·L_vis + beta·L_att
//   no_vis            attention loss only (alpha forced to 0)
//   no_att            similarity loss only (beta forced to 0)
//   lora_only         adapters on L_LLM alone
//   no_distill_direct interpolated expert features replace the student's
//                     visual states at the distill layer, no alignment losses
enum class Mode { full, no_vis, no_att, lora_only, no_distill_direct };

const char* mode_name(Mode mode);
Mode parse_mode(const std::string& name);
inline constexpr Mode kAllModes[] = {Mode::full, Mode::no_vis, Mode::no_att, Mode::lora_only, Mode::no_distill_direct};

struct ExperimentConfig {
  // Loss weights.
  double alpha = 1.0;
  double beta = 0.03;
  std::size_t distill_layer = 3;
  std::vector<std::size_t> extra_distill_layers;  // multi-layer variant; losses summed
  std::size_t adapter_rank = 4;

  // Student model.
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t width = 32;
  std::size_t vocab = 32;
  std::size_t mlp_hidden = 64;
  GridShape student_grid{4, 4};
  bool positional_encoding = true;
  AttentionQuery attention_query = AttentionQuery::last_prompt;
  AttentionScores attention_scores = AttentionScores::logits;
  bool rotation_in_forward = true;

  // Synthetic expert and dataset.
  GridShape expert_grid{8, 8};
  std::size_t expert_channels = 8;
  double expert_noise = 0.1;
  double expert_sharpness = 5.0;
  std::size_t entities_per_scene = 3;
  std::size_t entity_types = 4;
  std::size_t train_count = 200;
  std::size_t eval_count = 1000;
  std::uint64_t seed = 0;

  // Optimizer.
  double learning_rate = 1e-3;
  std::size_t steps = 4000;
  std::size_t batch_size = 1;

  Mode mode = Mode::full;
  std::string output_dir;

  void validate() const;

  ModelConfig model_config() const;
  DatasetConfig dataset_config() const;
  // Options after applying the mode: the weights actually trained with.
  TrainOptions train_options() const;
  std::vector<std::size_t> distill_layers() const;
};

// Fail-closed parse: unknown keys and wrong types are ConfigErrors. Missing
// keys keep their defaults.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

// Hash of the effective configuration: the mode is folded into the weights it
// implies and the output directory is ignored, so runs that train the same
// thing share a hash.
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::string hash_hex(std::uint64_t h);

}  // namespace aligndistill

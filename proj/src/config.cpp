#include "aligndistill/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "aligndistill/errors.hpp"

namespace aligndistill {

using nlohmann::json;

const char* mode_name(Mode mode) {
  switch (mode) {
    case Mode::full: return "full";
    case Mode::no_vis: return "no_vis";
    case Mode::no_att: return "no_att";
    case Mode::lora_only: return "lora_only";
    case Mode::no_distill_direct: return "no_distill_direct";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  for (Mode m : kAllModes)
    if (name == mode_name(m)) return m;
  throw ConfigError("unknown mode '" + name + "' (expected full, no_vis, no_att, lora_only or no_distill_direct)");
}

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "alpha", "beta", "distill_layer", "extra_distill_layers", "adapter_rank", "layers", "heads", "width",
      "vocab", "mlp_hidden", "student_grid", "positional_encoding", "attention_query", "attention_scores",
      "rotation_in_forward", "expert_grid", "expert_channels", "expert_noise", "expert_sharpness",
      "entities_per_scene", "entity_types", "train_count", "eval_count", "seed", "learning_rate", "steps",
      "batch_size", "mode", "output_dir"};
  return keys;
}

template <class T>
void read(const json& j, const char* key, T& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!it->is_number_unsigned()) throw ConfigError(std::string("'") + key + "' must be a non-negative integer");
    } else if constexpr (std::is_same_v<T, double>) {
      if (!it->is_number()) throw ConfigError(std::string("'") + key + "' must be a number");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError(std::string("'") + key + "' must be true or false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError(std::string("'") + key + "' must be a string");
    }
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

void read_grid(const json& j, const char* key, GridShape& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number_unsigned() || !(*it)[1].is_number_unsigned())
    throw ConfigError(std::string("'") + key + "' must be [rows, cols]");
  out = GridShape{(*it)[0].get<std::size_t>(), (*it)[1].get<std::size_t>()};
}

}  // namespace

void ExperimentConfig::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("alpha and beta must be non-negative");
  if (layers == 0 || heads == 0 || width == 0 || width % heads != 0)
    throw ConfigError("width must be a positive multiple of heads");
  for (std::size_t l : distill_layers())
    if (l < 1 || l > layers) throw ConfigError("distill layer " + std::to_string(l) + " outside 1.." + std::to_string(layers));
  if (adapter_rank == 0) throw ConfigError("adapter_rank must be positive");
  if (student_grid.h == 0 || student_grid.w == 0 || expert_grid.h == 0 || expert_grid.w == 0)
    throw ConfigError("grids must be non-empty");
  if (train_count == 0 || eval_count == 0) throw ConfigError("train_count and eval_count must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (mode == Mode::no_distill_direct && expert_channels > width)
    throw ConfigError("no_distill_direct needs expert_channels <= width");
  if (vocab < static_cast<std::size_t>(Vocabulary::kFirstLabel + Vocabulary::kLabelCount))
    throw ConfigError("vocab must be at least " + std::to_string(Vocabulary::kFirstLabel + Vocabulary::kLabelCount));
}

std::vector<std::size_t> ExperimentConfig::distill_layers() const {
  std::vector<std::size_t> out{distill_layer};
  for (std::size_t l : extra_distill_layers)
    if (l != distill_layer) out.push_back(l);
  return out;
}

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig m;
  m.layers = layers;
  m.heads = heads;
  m.width = width;
  m.vocab = vocab;
  m.mlp_hidden = mlp_hidden;
  m.grid = student_grid;
  m.patch_channels = DatasetConfig{}.image_channels;
  m.max_text = 8;
  m.positional = positional_encoding;
  m.query = attention_query;
  m.scores = attention_scores;
  return m;
}

DatasetConfig ExperimentConfig::dataset_config() const {
  DatasetConfig d;
  d.expert_grid = expert_grid;
  d.student_grid = student_grid;
  d.entities_per_scene = entities_per_scene;
  d.entity_types = entity_types;
  d.expert_channels = expert_channels;
  d.expert_noise = expert_noise;
  d.expert_sharpness = expert_sharpness;
  return d;
}

TrainOptions ExperimentConfig::train_options() const {
  TrainOptions o;
  o.weights = {alpha, beta};
  o.distill_layers = distill_layers();
  o.rotation_in_forward = rotation_in_forward;
  switch (mode) {
    case Mode::full: break;
    case Mode::no_vis: o.weights.alpha = 0.0; break;
    case Mode::no_att: o.weights.beta = 0.0; break;
    case Mode::lora_only: o.weights = {0.0, 0.0}; break;
    case Mode::no_distill_direct:
      o.weights = {0.0, 0.0};
      o.direct_replacement = true;
      break;
  }
  return o;
}

ExperimentConfig parse_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!known_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");

  ExperimentConfig c;
  read(j, "alpha", c.alpha);
  read(j, "beta", c.beta);
  read(j, "distill_layer", c.distill_layer);
  if (const auto it = j.find("extra_distill_layers"); it != j.end()) {
    if (!it->is_array()) throw ConfigError("'extra_distill_layers' must be an array");
    c.extra_distill_layers.clear();
    for (const auto& v : *it) {
      if (!v.is_number_unsigned()) throw ConfigError("'extra_distill_layers' entries must be layer numbers");
      c.extra_distill_layers.push_back(v.get<std::size_t>());
    }
  }
  read(j, "adapter_rank", c.adapter_rank);
  read(j, "layers", c.layers);
  read(j, "heads", c.heads);
  read(j, "width", c.width);
  read(j, "vocab", c.vocab);
  read(j, "mlp_hidden", c.mlp_hidden);
  read_grid(j, "student_grid", c.student_grid);
  read(j, "positional_encoding", c.positional_encoding);
  read(j, "rotation_in_forward", c.rotation_in_forward);
  if (j.contains("attention_query")) {
    std::string q;
    read(j, "attention_query", q);
    if (q == "last_prompt") c.attention_query = AttentionQuery::last_prompt;
    else if (q == "mean_prompt") c.attention_query = AttentionQuery::mean_prompt;
    else throw ConfigError("attention_query must be last_prompt or mean_prompt");
  }
  if (j.contains("attention_scores")) {
    std::string s;
    read(j, "attention_scores", s);
    if (s == "logits") c.attention_scores = AttentionScores::logits;
    else if (s == "probs") c.attention_scores = AttentionScores::probs;
    else throw ConfigError("attention_scores must be logits or probs");
  }
  read_grid(j, "expert_grid", c.expert_grid);
  read(j, "expert_channels", c.expert_channels);
  read(j, "expert_noise", c.expert_noise);
  read(j, "expert_sharpness", c.expert_sharpness);
  read(j, "entities_per_scene", c.entities_per_scene);
  read(j, "entity_types", c.entity_types);
  read(j, "train_count", c.train_count);
  read(j, "eval_count", c.eval_count);
  read(j, "seed", c.seed);
  read(j, "learning_rate", c.learning_rate);
  read(j, "steps", c.steps);
  read(j, "batch_size", c.batch_size);
  if (j.contains("mode")) {
    std::string m;
    read(j, "mode", m);
    c.mode = parse_mode(m);
  }
  read(j, "output_dir", c.output_dir);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["distill_layer"] = c.distill_layer;
  j["extra_distill_layers"] = c.extra_distill_layers;
  j["adapter_rank"] = c.adapter_rank;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["width"] = c.width;
  j["vocab"] = c.vocab;
  j["mlp_hidden"] = c.mlp_hidden;
  j["student_grid"] = {c.student_grid.h, c.student_grid.w};
  j["positional_encoding"] = c.positional_encoding;
  j["attention_query"] = c.attention_query == AttentionQuery::last_prompt ? "last_prompt" : "mean_prompt";
  j["attention_scores"] = c.attention_scores == AttentionScores::logits ? "logits" : "probs";
  j["rotation_in_forward"] = c.rotation_in_forward;
  j["expert_grid"] = {c.expert_grid.h, c.expert_grid.w};
  j["expert_channels"] = c.expert_channels;
  j["expert_noise"] = c.expert_noise;
  j["expert_sharpness"] = c.expert_sharpness;
  j["entities_per_scene"] = c.entities_per_scene;
  j["entity_types"] = c.entity_types;
  j["train_count"] = c.train_count;
  j["eval_count"] = c.eval_count;
  j["seed"] = c.seed;
  j["learning_rate"] = c.learning_rate;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["mode"] = mode_name(c.mode);
  j["output_dir"] = c.output_dir;
  return j;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  j.erase("output_dir");
  j.erase("mode");
  j.erase("alpha");
  j.erase("beta");
  const TrainOptions o = cfg.train_options();
  j["effective_alpha"] = o.weights.alpha;
  j["effective_beta"] = o.weights.beta;
  j["direct_replacement"] = o.direct_replacement;
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace aligndistill

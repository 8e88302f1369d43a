#include "aligndistill/expert_synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>

#include "aligndistill/rng.hpp"

namespace aligndistill {

namespace {

template <class T>
void shuffle(std::vector<T>& items, SeededRng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);
}

// A free rectangle whose quadrant is `wanted`: side lengths as in
// make_planted_scene, position uniform over the placements that fit.
std::optional<Rect> place_in_quadrant(const PlantedScene& scene, QueryLabel wanted, const SceneOptions& options,
                                      SeededRng& rng) {
  const GridShape g = scene.shape;
  const std::size_t max_h = std::min(options.max_side, g.h), max_w = std::min(options.max_side, g.w);
  Rect r;
  r.height = options.min_side + rng.below(max_h - options.min_side + 1);
  r.width = options.min_side + rng.below(max_w - options.min_side + 1);
  std::vector<Rect> fits;
  for (std::size_t row = 0; row + r.height <= g.h; ++row)
    for (std::size_t col = 0; col + r.width <= g.w; ++col) {
      const Rect c{row, col, r.height, r.width};
      if (quadrant_of(c, g) != wanted) continue;
      bool free = true;
      for (std::size_t i = row; i < row + r.height && free; ++i)
        for (std::size_t j = col; j < col + r.width && free; ++j) free = scene.labels[i * g.w + j] == 0;
      if (free) fits.push_back(c);
    }
  if (fits.empty()) return std::nullopt;
  return fits[rng.below(fits.size())];
}

PlantedScene add_region(PlantedScene scene, const Rect& r) {
  const int id = static_cast<int>(scene.regions.size()) + 1;
  for (std::size_t i = r.row; i < r.row + r.height; ++i)
    for (std::size_t j = r.col; j < r.col + r.width; ++j) scene.labels[i * scene.shape.w + j] = id;
  scene.regions.push_back(r);
  scene.entity_ids.push_back(id);
  return scene;
}

AttentionVector flat_attention(std::size_t cells, double amplitude, std::uint64_t seed) {
  SeededRng rng(seed);
  AttentionVector out{std::vector<double>(cells, 0.0), false};
  for (double& v : out.scores) v = amplitude * rng.uniform(-1.0, 1.0);
  return out;
}

}  // namespace

const Rect* PlantedScene::region_of(int entity) const {
  for (std::size_t i = 0; i < entity_ids.size(); ++i)
    if (entity_ids[i] == entity) return &regions[i];
  return nullptr;
}

std::vector<std::size_t> PlantedScene::cells_of(int entity) const {
  std::vector<std::size_t> cells;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == entity) cells.push_back(i);
  return cells;
}

PlantedScene make_planted_scene(std::uint64_t seed, GridShape shape, std::size_t k, const SceneOptions& options) {
  if (k == 0) throw std::invalid_argument("make_planted_scene: need at least one entity");
  if (shape.h == 0 || shape.w == 0) throw std::invalid_argument("make_planted_scene: empty grid");
  if (options.min_side == 0 || options.min_side > options.max_side)
    throw ConfigError("make_planted_scene: invalid side range");
  if (options.min_side > shape.h || options.min_side > shape.w)
    throw ConfigError("make_planted_scene: minimum region side exceeds the grid");

  PlantedScene scene;
  scene.shape = shape;
  scene.seed = seed;
  scene.labels.assign(shape.tokens(), 0);
  SeededRng rng(seed);

  std::size_t attempts = 0;
  while (scene.regions.size() < k) {
    if (attempts++ >= options.max_retries)
      throw ConfigError("make_planted_scene: could not place " + std::to_string(k) + " disjoint regions after " +
                        std::to_string(options.max_retries) + " attempts");
    Rect r;
    const std::size_t max_h = std::min(options.max_side, shape.h);
    const std::size_t max_w = std::min(options.max_side, shape.w);
    r.height = options.min_side + rng.below(max_h - options.min_side + 1);
    r.width = options.min_side + rng.below(max_w - options.min_side + 1);
    r.row = rng.below(shape.h - r.height + 1);
    r.col = rng.below(shape.w - r.width + 1);
    bool free = true;
    for (std::size_t i = r.row; i < r.row + r.height && free; ++i)
      for (std::size_t j = r.col; j < r.col + r.width && free; ++j) free = scene.labels[i * shape.w + j] == 0;
    if (!free) continue;
    const int id = static_cast<int>(scene.regions.size()) + 1;
    for (std::size_t i = r.row; i < r.row + r.height; ++i)
      for (std::size_t j = r.col; j < r.col + r.width; ++j) scene.labels[i * shape.w + j] = id;
    scene.regions.push_back(r);
    scene.entity_ids.push_back(id);
  }
  return scene;
}

PlantedScene relabel(const PlantedScene& scene, std::span<const int> ids) {
  if (ids.size() != scene.entity_count()) throw std::invalid_argument("relabel: one id per entity required");
  PlantedScene out = scene;
  for (int& label : out.labels)
    if (label > 0) label = ids[static_cast<std::size_t>(label) - 1];
  for (std::size_t i = 0; i < out.entity_ids.size(); ++i) out.entity_ids[i] = ids[static_cast<std::size_t>(scene.entity_ids[i]) - 1];
  return out;
}

Tensor make_prototypes(std::uint64_t seed, std::size_t count, std::size_t channels) {
  SeededRng rng(seed);
  Tensor protos = Tensor::matrix(count, channels);
  for (double& v : protos.data()) v = rng.normal();
  return l2_normalize_rows(protos);
}

FeatureGrid expert_features(const PlantedScene& scene, const Tensor& prototypes, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("expert_features: sigma must be non-negative");
  const std::size_t b = prototypes.cols();
  SeededRng rng(seed);
  FeatureGrid grid(scene.shape, b);
  for (std::size_t cell = 0; cell < scene.labels.size(); ++cell) {
    const auto proto = prototypes.row(static_cast<std::size_t>(scene.labels[cell]));
    auto token = grid.token(cell);
    for (std::size_t c = 0; c < b; ++c) token[c] = proto[c] + (sigma > 0.0 ? sigma * rng.normal() : 0.0);
  }
  return FeatureGrid(scene.shape, l2_normalize_rows(grid.values()));
}

FeatureGrid expert_features(const PlantedScene& scene, std::size_t channels, double sigma, std::uint64_t seed) {
  const int max_label = *std::max_element(scene.labels.begin(), scene.labels.end());
  const Tensor protos = make_prototypes(derive_seed(seed, 0x9707), static_cast<std::size_t>(max_label) + 1, channels);
  return expert_features(scene, protos, sigma, derive_seed(seed, 0x7015e));
}

double softmax_mass(std::span<const double> raw, std::span<const std::size_t> cells) {
  const auto p = softmax(raw);
  double mass = 0.0;
  for (std::size_t c : cells) mass += p.at(c);
  return mass;
}

AttentionVector expert_attention(const PlantedScene& scene, int query, const ExpertAttentionOptions& options) {
  if (query <= 0 || scene.region_of(query) == nullptr)
    throw std::invalid_argument("expert_attention: entity " + std::to_string(query) + " is not in the scene");
  AttentionVector att = flat_attention(scene.labels.size(), options.sharpness / 100.0, options.jitter_seed);
  const auto cells = scene.cells_of(query);
  for (std::size_t c : cells) att.scores[c] += options.sharpness;
  const double mass = softmax_mass(att.scores, cells);
  if (mass < options.concentration)
    throw ConfigError("expert_attention: region mass " + std::to_string(mass) + " is below the required " +
                      std::to_string(options.concentration) + "; raise the sharpness");
  return att;
}

DistillTarget make_distill_target(const ExpertBundle& expert, GridShape student) {
  DistillTarget out;
  out.features = interpolate_features(expert.features, student);
  out.similarity = similarity_matrix(out.features);
  out.attention = AttentionVector{interpolate_attention(expert.attention.scores, expert.scene.shape, student), false};
  return out;
}

QueryLabel quadrant_of(const Rect& region, GridShape shape) {
  // Twice the center coordinate against twice the grid midline keeps this integral.
  const bool bottom = 2 * region.row + region.height - 1 >= shape.h - 1;
  const bool right = 2 * region.col + region.width - 1 >= shape.w - 1;
  if (!bottom) return right ? QueryLabel::top_right : QueryLabel::top_left;
  return right ? QueryLabel::bottom_right : QueryLabel::bottom_left;
}

Tensor render_patches(const PlantedScene& scene, const Tensor& appearance, double noise, GridShape student,
                      std::uint64_t seed) {
  const std::size_t channels = appearance.cols();
  SeededRng rng(seed);
  FeatureGrid image(scene.shape, channels);
  for (std::size_t cell = 0; cell < scene.labels.size(); ++cell) {
    const auto look = appearance.row(static_cast<std::size_t>(scene.labels[cell]));
    auto px = image.token(cell);
    for (std::size_t c = 0; c < channels; ++c) px[c] = look[c] + noise * rng.normal();
  }
  Tensor patches = Tensor::matrix(student.tokens(), channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const Tensor plane = bilinear_resize(image.channel(c), student);
    for (std::size_t t = 0; t < student.tokens(); ++t) patches(t, c) = plane[t];
  }
  return patches;
}

std::vector<Example> make_dataset(std::uint64_t seed, std::size_t count, const DatasetConfig& config) {
  if (count == 0) throw std::invalid_argument("make_dataset: count must be positive");
  if (config.entity_types <= config.entities_per_scene)
    throw ConfigError("make_dataset: entity_types must exceed entities_per_scene so absent queries exist");
  if (Vocabulary::kFirstEntity + static_cast<int>(config.entity_types) > Vocabulary::kFirstLabel)
    throw ConfigError("make_dataset: too many entity types for the token layout");

  const Tensor prototypes = make_prototypes(derive_seed(config.world_seed, 1), config.entity_types + 1, config.expert_channels);
  const Tensor appearance = make_prototypes(derive_seed(config.world_seed, 2), config.entity_types + 1, config.image_channels);

  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % Vocabulary::kLabelCount);
  {
    SeededRng order(derive_seed(seed, 0x1abe1));
    shuffle(labels, order);
  }

  std::vector<int> types(config.entity_types);
  std::iota(types.begin(), types.end(), 1);

  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t ex_seed = derive_seed(seed, 1000 + i);
    SeededRng rng(ex_seed);
    const auto wanted = static_cast<QueryLabel>(labels[i]);

    Example ex;
    ex.label = wanted;
    bool done = false;
    for (std::size_t attempt = 0; attempt < config.scene.max_retries && !done; ++attempt) {
      // Present queries: the distractors are laid out first, independently of
      // the label, and the queried entity is then placed in the wanted
      // quadrant. Their layout alone says little about the answer.
      const bool present = wanted != QueryLabel::absent;
      const std::size_t distractors = config.entities_per_scene - (present ? 1 : 0);
      PlantedScene raw;
      if (distractors > 0) {
        raw = make_planted_scene(rng.next_u64(), config.expert_grid, distractors, config.scene);
      } else {
        raw.shape = config.expert_grid;
        raw.labels.assign(config.expert_grid.tokens(), 0);
      }
      if (present) {
        const std::optional<Rect> r = place_in_quadrant(raw, wanted, config.scene, rng);
        if (!r) continue;
        raw = add_region(std::move(raw), *r);
      }
      std::vector<int> pool = types;
      shuffle(pool, rng);
      const std::vector<int> chosen(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(config.entities_per_scene));
      const PlantedScene scene = relabel(raw, chosen);
      const int query = present ? chosen.back()
                                : pool[config.entities_per_scene + rng.below(pool.size() - config.entities_per_scene)];

      ExpertBundle& expert = ex.expert;
      expert.scene = scene;
      expert.query = query;
      expert.query_present = wanted != QueryLabel::absent;
      expert.features = expert_features(scene, prototypes, config.expert_noise, derive_seed(ex_seed, 1));
      if (expert.query_present) {
        expert.attention = expert_attention(scene, query, {config.expert_sharpness, config.concentration, derive_seed(ex_seed, 2)});
      } else {
        expert.attention = flat_attention(scene.labels.size(), config.expert_sharpness / 100.0, derive_seed(ex_seed, 2));
      }
      expert.cls.assign(config.expert_channels, 0.0);
      for (int id : scene.entity_ids) {
        const auto proto = prototypes.row(static_cast<std::size_t>(id));
        for (std::size_t c = 0; c < config.expert_channels; ++c)
          expert.cls[c] += proto[c] / static_cast<double>(scene.entity_count());
      }

      ex.sequence.patches = render_patches(scene, appearance, config.image_noise, config.student_grid, derive_seed(ex_seed, 3));
      ex.sequence.prompt = {Vocabulary::kAsk, Vocabulary::entity_token(query)};
      ex.sequence.targets = {Vocabulary::label_token(labels[i])};
      done = true;
    }
    if (!done) throw ConfigError("make_dataset: could not realize the requested label; grid too small for the entity layout");
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace aligndistill

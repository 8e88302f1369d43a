#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "aligndistill/errors.hpp"
#include "aligndistill/interp.hpp"
#include "aligndistill/losses.hpp"
#include "aligndistill/tensor.hpp"
#include "aligndistill/toy_model.hpp"

namespace aligndistill {

struct Rect {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool contains(std::size_t r, std::size_t c) const {
    return r >= row && r < row + height && c >= col && c < col + width;
  }
  friend bool operator==(const Rect&, const Rect&) = default;
};

// Grid with disjoint rectangular entities on a background (label 0).
struct PlantedScene {
  GridShape shape{};
  std::vector<int> labels;         // row-major, one id per cell
  std::vector<int> entity_ids;     // ids of the placed entities, in placement order
  std::vector<Rect> regions;       // regions[i] belongs to entity_ids[i]
  std::uint64_t seed = 0;

  std::size_t entity_count() const { return regions.size(); }
  const Rect* region_of(int entity) const;
  // Cells (row-major indices) carrying `entity`.
  std::vector<std::size_t> cells_of(int entity) const;
};

struct SceneOptions {
  std::size_t min_side = 2;
  std::size_t max_side = 3;
  std::size_t max_retries = 1000;
};

// Places k disjoint rectangles labelled 1..k. Throws ConfigError when they
// cannot be placed within the retry budget.
PlantedScene make_planted_scene(std::uint64_t seed, GridShape shape, std::size_t k, const SceneOptions& options = {});

// Copy of `scene` with entity i (1-based) renamed to ids[i-1].
PlantedScene relabel(const PlantedScene& scene, std::span<const int> ids);

// Fixed random unit vectors, row e is the prototype of entity id e.
Tensor make_prototypes(std::uint64_t seed, std::size_t count, std::size_t channels);

// Each cell: prototype of its entity plus N(0, sigma²) noise, l2-normalized.
FeatureGrid expert_features(const PlantedScene& scene, const Tensor& prototypes, double sigma, std::uint64_t seed);
// Convenience form: prototypes drawn from `seed` for ids 0..max label.
FeatureGrid expert_features(const PlantedScene& scene, std::size_t channels, double sigma, std::uint64_t seed);

struct ExpertAttentionOptions {
  double sharpness = 5.0;       // raw score on the queried region
  double concentration = 0.8;   // minimum post-softmax mass required on the region
  std::uint64_t jitter_seed = 0;
};

// Raw scores: sharpness on the queried entity's cells, 0 elsewhere, plus
// seeded jitter of amplitude sharpness/100. Throws std::invalid_argument for
// an entity not in the scene and ConfigError if the concentration check fails.
AttentionVector expert_attention(const PlantedScene& scene, int query, const ExpertAttentionOptions& options = {});

// Post-softmax mass of `raw` on `cells`.
double softmax_mass(std::span<const double> raw, std::span<const std::size_t> cells);

struct ExpertBundle {
  std::vector<double> cls;   // mean of the present entities' prototypes; carried, not consumed
  FeatureGrid features;      // M × b
  AttentionVector attention; // M raw scores
  PlantedScene scene;
  int query = 0;             // queried entity id; absent queries carry a flat attention map
  bool query_present = true;
};

// Expert side interpolated onto the student grid, ready for the losses.
struct DistillTarget {
  FeatureGrid features;         // expert features interpolated and renormalized (N × b)
  SimilarityMatrix similarity;  // S^e on the student grid
  AttentionVector attention;    // interpolated raw teacher scores
};

DistillTarget make_distill_target(const ExpertBundle& expert, GridShape student);

struct DatasetConfig {
  GridShape expert_grid{8, 8};
  GridShape student_grid{4, 4};
  std::size_t entities_per_scene = 3;
  std::size_t entity_types = 4;       // query vocabulary; scenes use a random subset
  std::size_t expert_channels = 8;    // b
  double expert_noise = 0.1;          // sigma
  double expert_sharpness = 5.0;      // tau
  double concentration = 0.8;
  std::uint64_t world_seed = 0x5eed;  // entity prototypes and appearances; shared by train and eval splits
  std::size_t image_channels = 6;     // raw appearance channels seen by the student
  double image_noise = 0.1;
  SceneOptions scene{};
};

// Token layout shared by the dataset and the harness.
struct Vocabulary {
  static constexpr int kAsk = 1;
  static constexpr int kFirstEntity = 2;   // entity type e -> kFirstEntity + e - 1
  static constexpr int kFirstLabel = 16;   // label j -> kFirstLabel + j
  static constexpr int kLabelCount = 5;    // absent, top-left, top-right, bottom-left, bottom-right
  static int entity_token(int entity) { return kFirstEntity + entity - 1; }
  static int label_token(int label) { return kFirstLabel + label; }
};

enum class QueryLabel : int { absent = 0, top_left = 1, top_right = 2, bottom_left = 3, bottom_right = 4 };

// Quadrant of the rectangle's center; centers on a midline go to the
// bottom/right half.
QueryLabel quadrant_of(const Rect& region, GridShape shape);

struct Example {
  TokenSequence sequence;
  ExpertBundle expert;
  QueryLabel label = QueryLabel::absent;
};

// Labels are balanced exactly: example i draws its label from a shuffled
// round-robin over the five classes. For a present query the other entities
// are placed first and the queried one is then put in the wanted quadrant,
// so the rest of the scene carries little information about the label.
std::vector<Example> make_dataset(std::uint64_t seed, std::size_t count, const DatasetConfig& config);

// Raw appearance image on the expert grid resized onto the student grid:
// N × image_channels patches for the student's frozen patch embedder.
Tensor render_patches(const PlantedScene& scene, const Tensor& appearance, double noise, GridShape student,
                      std::uint64_t seed);

}  // namespace aligndistill

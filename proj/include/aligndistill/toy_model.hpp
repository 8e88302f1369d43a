#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aligndistill/gradients.hpp"
#include "aligndistill/interp.hpp"
#include "aligndistill/losses.hpp"
#include "aligndistill/tape.hpp"
#include "aligndistill/tensor.hpp"

namespace aligndistill {

// Which query position supplies the per-head visual attention row.
enum class AttentionQuery { last_prompt, mean_prompt };
// Whether that row is taken before or after the attention softmax.
enum class AttentionScores { logits, probs };

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t width = 32;
  std::size_t vocab = 32;
  std::size_t mlp_hidden = 64;
  GridShape grid{4, 4};           // student visual grid, N = h*w
  std::size_t patch_channels = 6; // raw channels per visual patch
  std::size_t max_text = 8;       // prompt + fed-back target tokens
  bool positional = true;         // learned absolute positions (frozen)
  AttentionQuery query = AttentionQuery::last_prompt;
  AttentionScores scores = AttentionScores::logits;

  void validate() const;
};

enum class LinearSlot : std::size_t { q, k, v, o, up, down };
inline constexpr std::array<LinearSlot, 6> kLinearSlots{LinearSlot::q, LinearSlot::k, LinearSlot::v,
                                                        LinearSlot::o, LinearSlot::up, LinearSlot::down};
const char* slot_name(LinearSlot slot);

// Frozen base parameters of a small decoder-only transformer with a visual
// prefix. Pre-norm residual blocks, RMS norm without gain, GELU MLP, no biases.
class ToyTransformer {
 public:
  ToyTransformer(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Tensor& patch_embed() const { return patch_embed_; }  // patch_channels × d
  const Tensor& token_embed() const { return token_embed_; }  // vocab × d
  const Tensor& pos_embed() const { return pos_embed_; }      // (N + max_text) × d
  const Tensor& lm_head() const { return lm_head_; }          // d × vocab
  const Tensor& weight(std::size_t layer, LinearSlot slot) const;  // layer is 0-based

  // In/out widths of a linear slot.
  std::pair<std::size_t, std::size_t> slot_dims(LinearSlot slot) const;

  // Checksum over every frozen tensor.
  std::uint64_t checksum() const;

 private:
  ModelConfig config_;
  Tensor patch_embed_;
  Tensor token_embed_;
  Tensor pos_embed_;
  Tensor lm_head_;
  std::vector<std::array<Tensor, 6>> layers_;
};

// Low-rank adapters on every linear layer: W_eff = W + A·B with A (in×r),
// B (r×out). Tensors are keyed "layer<i>.<slot>.A" / ".B", i 1-based.
struct AdapterParams {
  std::size_t rank = 0;
  ParamSet tensors;

  // A ~ N(0, 1/in), B = 0, so the adapted model starts at the base model.
  static AdapterParams init(const ToyTransformer& model, std::size_t rank, std::uint64_t seed);
  static std::string key(std::size_t layer, LinearSlot slot, char factor);
};

// Visual patches precede the prompt; during teacher forcing every target
// token except the last is appended after the prompt.
struct TokenSequence {
  Tensor patches;            // N × patch_channels
  std::vector<int> prompt;   // length T >= 1
  std::vector<int> targets;  // length T_out >= 1
};

struct ForwardTrace {
  Tensor logits;                    // T_out × vocab
  std::vector<Tensor> visual_input; // [i] = visual rows entering layer i+1 (N × d)
  std::vector<Tensor> attention;    // [i] = per-head visual attention rows of layer i+1 (H × N)
  GridShape grid{};

  std::uint64_t hash() const;
};

// Intervention at the input of a layer.
struct LayerHook {
  std::size_t layer = 0;                 // 1-based
  std::optional<Var> rotation;           // W on the tape; takes precedence over rotation_value
  std::optional<Tensor> rotation_value;  // W as a constant
  bool rotate_in_forward = true;         // rotated rows replace the layer input
  std::optional<Tensor> replacement;     // N × d rows substituted for the visual states
};

// Graph handles produced while building the forward pass on a tape.
struct TapeTrace {
  Var logits;
  std::vector<Var> visual_input;    // per layer, before any hook
  std::vector<Var> rotated;         // per layer; only valid where a rotation hook ran
  std::vector<Var> attention;       // per layer, H × N
};

// Adapter tensors as tape variables, keyed like AdapterParams::tensors.
using AdapterVars = std::map<std::string, Var>;

TapeTrace build_forward(Tape& tape, const ToyTransformer& model, const AdapterVars* adapters,
                        const TokenSequence& seq, std::span<const LayerHook> hooks = {});

// Plain evaluation (no gradients). `adapters` may be null for the base model.
ForwardTrace forward(const ToyTransformer& model, const AdapterParams* adapters, const TokenSequence& seq,
                     std::span<const LayerHook> hooks = {});

// Mean over output positions of -ln p(y_t).
double lm_loss(const ForwardTrace& trace, std::span<const int> targets);

FeatureGrid extract_visual_states(const ForwardTrace& trace, std::size_t layer);
Tensor extract_visual_attention(const ForwardTrace& trace, std::size_t layer);

}  // namespace aligndistill

#include "aligndistill/toy_model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "aligndistill/rng.hpp"

namespace aligndistill {

namespace {

Tensor random_matrix(SeededRng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

// mask(i, j) = 1 where query i may read key j: the visual prefix is visible
// to everyone, text positions are causal.
Tensor prefix_causal_mask(std::size_t visual, std::size_t total) {
  Tensor mask = Tensor::matrix(total, total);
  for (std::size_t i = 0; i < total; ++i)
    for (std::size_t j = 0; j < total; ++j) mask(i, j) = (j < visual || j <= i) ? 1.0 : 0.0;
  return mask;
}

}  // namespace

void ModelConfig::validate() const {
  if (layers == 0 || heads == 0 || width == 0 || vocab == 0 || mlp_hidden == 0 || patch_channels == 0)
    throw std::invalid_argument("model dimensions must be positive");
  if (width % heads != 0) throw std::invalid_argument("model width must be divisible by the head count");
  if (grid.h == 0 || grid.w == 0) throw std::invalid_argument("student grid must be non-empty");
  if (max_text < 1) throw std::invalid_argument("max_text must be at least 1");
}

const char* slot_name(LinearSlot slot) {
  switch (slot) {
    case LinearSlot::q: return "q";
    case LinearSlot::k: return "k";
    case LinearSlot::v: return "v";
    case LinearSlot::o: return "o";
    case LinearSlot::up: return "up";
    case LinearSlot::down: return "down";
  }
  return "?";
}

ToyTransformer::ToyTransformer(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t d = config_.width;
  SeededRng rng(derive_seed(seed, 0x70d1));
  patch_embed_ = random_matrix(rng, config_.patch_channels, d, 1.0);
  token_embed_ = random_matrix(rng, config_.vocab, d, 1.0);
  pos_embed_ = random_matrix(rng, config_.grid.tokens() + config_.max_text, d, 1.0);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    std::array<Tensor, 6> block;
    for (LinearSlot slot : kLinearSlots) {
      const auto [in, out] = slot_dims(slot);
      block[static_cast<std::size_t>(slot)] = random_matrix(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in)));
    }
    layers_.push_back(std::move(block));
  }
  lm_head_ = random_matrix(rng, d, config_.vocab, 1.0 / std::sqrt(static_cast<double>(d)));
}

const Tensor& ToyTransformer::weight(std::size_t layer, LinearSlot slot) const {
  return layers_.at(layer)[static_cast<std::size_t>(slot)];
}

std::pair<std::size_t, std::size_t> ToyTransformer::slot_dims(LinearSlot slot) const {
  const std::size_t d = config_.width;
  switch (slot) {
    case LinearSlot::up: return {d, config_.mlp_hidden};
    case LinearSlot::down: return {config_.mlp_hidden, d};
    default: return {d, d};
  }
}

std::uint64_t ToyTransformer::checksum() const {
  std::uint64_t h = aligndistill::checksum(patch_embed_);
  h = aligndistill::checksum(token_embed_, h);
  h = aligndistill::checksum(pos_embed_, h);
  for (const auto& block : layers_)
    for (const Tensor& w : block) h = aligndistill::checksum(w, h);
  return aligndistill::checksum(lm_head_, h);
}

std::string AdapterParams::key(std::size_t layer, LinearSlot slot, char factor) {
  return "layer" + std::to_string(layer) + "." + slot_name(slot) + "." + factor;
}

AdapterParams AdapterParams::init(const ToyTransformer& model, std::size_t rank, std::uint64_t seed) {
  if (rank == 0) throw std::invalid_argument("adapter rank must be positive");
  AdapterParams out;
  out.rank = rank;
  SeededRng rng(derive_seed(seed, 0xada9));
  for (std::size_t l = 1; l <= model.config().layers; ++l) {
    for (LinearSlot slot : kLinearSlots) {
      const auto [in, outw] = model.slot_dims(slot);
      out.tensors[key(l, slot, 'A')] = random_matrix(rng, in, rank, 1.0 / std::sqrt(static_cast<double>(in)));
      out.tensors[key(l, slot, 'B')] = Tensor::matrix(rank, outw);
    }
  }
  return out;
}

std::uint64_t ForwardTrace::hash() const {
  std::uint64_t h = checksum(logits);
  for (const Tensor& t : visual_input) h = checksum(t, h);
  for (const Tensor& t : attention) h = checksum(t, h);
  return h;
}

TapeTrace build_forward(Tape& tape, const ToyTransformer& model, const AdapterVars* adapters,
                        const TokenSequence& seq, std::span<const LayerHook> hooks) {
  const ModelConfig& cfg = model.config();
  const std::size_t n_vis = cfg.grid.tokens();
  const std::size_t d = cfg.width;
  const std::size_t t_prompt = seq.prompt.size();
  const std::size_t t_out = seq.targets.size();
  if (t_prompt == 0 || t_out == 0) throw std::invalid_argument("forward: prompt and targets must be non-empty");
  if (seq.patches.rank() != 2 || seq.patches.rows() != n_vis || seq.patches.cols() != cfg.patch_channels)
    throw std::invalid_argument("forward: visual patches do not match the model grid");
  const std::size_t n_text = t_prompt + t_out - 1;
  if (n_text > cfg.max_text) throw std::invalid_argument("forward: sequence exceeds the configured maximum length");
  const std::size_t total = n_vis + n_text;
  for (const auto& hook : hooks)
    if (hook.layer < 1 || hook.layer > cfg.layers) throw std::invalid_argument("forward: hook layer out of range");

  // Embedding: frozen patch projection for the visual prefix, token table for text.
  Tensor x0 = Tensor::matrix(total, d);
  {
    const Tensor vis = matmul(seq.patches, model.patch_embed());
    std::copy(vis.data().begin(), vis.data().end(), x0.data().begin());
    auto embed_text = [&](std::size_t pos, int id) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab)
        throw std::invalid_argument("forward: token id out of vocabulary");
      const auto src = model.token_embed().row(static_cast<std::size_t>(id));
      std::copy(src.begin(), src.end(), x0.row(pos).begin());
    };
    for (std::size_t i = 0; i < t_prompt; ++i) embed_text(n_vis + i, seq.prompt[i]);
    for (std::size_t i = 0; i + 1 < t_out; ++i) embed_text(n_vis + t_prompt + i, seq.targets[i]);
    if (cfg.positional) {
      for (std::size_t p = 0; p < total; ++p) {
        const auto pe = model.pos_embed().row(p);
        auto row = x0.row(p);
        for (std::size_t c = 0; c < d; ++c) row[c] += pe[c];
      }
    }
  }

  const Tensor mask = prefix_causal_mask(n_vis, total);
  const std::size_t head_dim = d / cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const std::size_t query = n_vis + t_prompt - 1;

  auto linear = [&](Var h, std::size_t layer, LinearSlot slot) {
    Var w = tape.constant(model.weight(layer - 1, slot));
    Var y = ops::matmul(h, w);
    if (adapters) {
      const Var& a = adapters->at(AdapterParams::key(layer, slot, 'A'));
      const Var& b = adapters->at(AdapterParams::key(layer, slot, 'B'));
      y = ops::add(y, ops::matmul(ops::matmul(h, a), b));
    }
    return y;
  };

  TapeTrace trace;
  Var x = tape.constant(std::move(x0));
  for (std::size_t layer = 1; layer <= cfg.layers; ++layer) {
    Var visual = ops::slice_rows(x, 0, n_vis);
    trace.visual_input.push_back(visual);
    trace.rotated.emplace_back();
    for (const auto& hook : hooks) {
      if (hook.layer != layer) continue;
      if (hook.rotation || hook.rotation_value) {
        Var w = hook.rotation ? *hook.rotation : tape.constant(*hook.rotation_value);
        Var rotated = ops::rotate(visual, w);
        trace.rotated.back() = rotated;
        if (hook.rotate_in_forward) x = ops::replace_rows(x, 0, rotated);
      }
      if (hook.replacement) {
        if (hook.replacement->rows() != n_vis || hook.replacement->cols() != d)
          throw std::invalid_argument("forward: replacement rows must be N × d");
        x = ops::replace_rows(x, 0, tape.constant(*hook.replacement));
      }
    }

    Var h = ops::rms_norm(x);
    Var q = linear(h, layer, LinearSlot::q);
    Var k = linear(h, layer, LinearSlot::k);
    Var v = linear(h, layer, LinearSlot::v);
    std::vector<Var> head_out;
    std::vector<Var> head_rows;
    for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
      Var qh = ops::slice_cols(q, hd * head_dim, head_dim);
      Var kh = ops::slice_cols(k, hd * head_dim, head_dim);
      Var vh = ops::slice_cols(v, hd * head_dim, head_dim);
      Var scores = ops::scale(ops::matmul_nt(qh, kh), inv_sqrt);
      Var probs = ops::masked_softmax(scores, mask);
      head_out.push_back(ops::matmul(probs, vh));

      Var source = cfg.scores == AttentionScores::logits ? scores : probs;
      Var row;
      if (cfg.query == AttentionQuery::last_prompt) {
        row = ops::slice_cols(ops::slice_rows(source, query, 1), 0, n_vis);
      } else {
        row = ops::mean_rows(ops::slice_cols(ops::slice_rows(source, n_vis, t_prompt), 0, n_vis));
      }
      head_rows.push_back(row);
    }
    trace.attention.push_back(ops::concat_rows(head_rows));
    Var attn = linear(ops::concat_cols(head_out), layer, LinearSlot::o);
    x = ops::add(x, attn);

    Var h2 = ops::rms_norm(x);
    Var mlp = linear(ops::gelu(linear(h2, layer, LinearSlot::up)), layer, LinearSlot::down);
    x = ops::add(x, mlp);
  }

  Var out_rows = ops::slice_rows(ops::rms_norm(x), query, t_out);
  trace.logits = ops::matmul(out_rows, tape.constant(model.lm_head()));
  return trace;
}

ForwardTrace forward(const ToyTransformer& model, const AdapterParams* adapters, const TokenSequence& seq,
                     std::span<const LayerHook> hooks) {
  Tape tape;
  AdapterVars vars;
  if (adapters)
    for (const auto& [name, t] : adapters->tensors) vars.emplace(name, tape.constant(t));
  const TapeTrace tt = build_forward(tape, model, adapters ? &vars : nullptr, seq, hooks);
  ForwardTrace out;
  out.logits = tt.logits.value();
  out.grid = model.config().grid;
  for (const Var& v : tt.visual_input) out.visual_input.push_back(v.value());
  for (const Var& a : tt.attention) out.attention.push_back(a.value());
  return out;
}

double lm_loss(const ForwardTrace& trace, std::span<const int> targets) {
  if (trace.logits.rows() != targets.size())
    throw std::invalid_argument("lm_loss: target length does not match the logit rows");
  double total = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const int y = targets[r];
    if (y < 0 || static_cast<std::size_t>(y) >= trace.logits.cols())
      throw std::invalid_argument("lm_loss: target out of vocabulary");
    total -= log_softmax(trace.logits.row(r))[static_cast<std::size_t>(y)];
  }
  return total / static_cast<double>(targets.size());
}

FeatureGrid extract_visual_states(const ForwardTrace& trace, std::size_t layer) {
  if (layer < 1 || layer > trace.visual_input.size())
    throw std::invalid_argument("extract_visual_states: layer out of range");
  return FeatureGrid(trace.grid, trace.visual_input[layer - 1]);
}

Tensor extract_visual_attention(const ForwardTrace& trace, std::size_t layer) {
  if (layer < 1 || layer > trace.attention.size())
    throw std::invalid_argument("extract_visual_attention: layer out of range");
  return trace.attention[layer - 1];
}

}  // namespace aligndistill

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "aligndistill/tensor.hpp"

namespace aligndistill {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  bool needs_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Minimal matrix-level reverse-mode autodiff. Nodes are appended in
// evaluation order; backward() walks them in reverse. Gradients are only
// propagated through nodes that depend on a parameter.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  // Seeds d(root)/d(root) = 1; root must hold a single element.
  void backward(Var root);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var push(Tensor value, std::span<const Var> inputs, Backward backward);
  Var push(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }
  void accumulate(std::size_t id, const Tensor& contribution);
  void accumulate(Var v, const Tensor& contribution) { accumulate(v.id(), contribution); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

namespace ops {

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a·bᵀ
Var add(Var a, Var b);
Var scale(Var a, double s);
// Row-wise x / sqrt(mean(x²) + eps).
Var rms_norm(Var x, double eps = 1e-6);
// tanh approximation of GELU.
Var gelu(Var x);
Var slice_cols(Var x, std::size_t first, std::size_t count);
Var slice_rows(Var x, std::size_t first, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
// x with rows [first, first + rows(y)) replaced by y.
Var replace_rows(Var x, std::size_t first, Var y);
// Column-wise mean over rows: R×C -> 1×C.
Var mean_rows(Var x);
// Row softmax where mask(i, j) == 0 blocks position j for row i.
Var masked_softmax(Var scores, const Tensor& mask);
// Mean token cross-entropy of logits rows against target ids (1×1).
Var cross_entropy(Var logits, std::span<const int> targets);
// x + x·wᵀ.
Var rotate(Var x, Var w);
// Pairwise cosine similarity of rows, unit diagonal.
Var cosine_similarity(Var x);
// mean((x - target)²) against a constant (1×1).
Var mse_to(Var x, const Tensor& target);
// KL(softmax(teacher) || softmax(student)), teacher constant (1×1).
Var softmax_kl(std::span<const double> teacher_raw, Var student_raw);

}  // namespace ops
}  // namespace aligndistill

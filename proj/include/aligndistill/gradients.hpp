#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "aligndistill/interp.hpp"
#include "aligndistill/losses.hpp"
#include "aligndistill/tensor.hpp"

namespace aligndistill {

// Named parameter tensors. Used both for the trainable set and for the
// matching gradients.
using ParamSet = std::map<std::string, Tensor>;

// Partial derivatives keyed like the parameters they belong to.
struct GradientBundle {
  double loss = 0.0;
  ParamSet by_param;
  std::size_t zero_rows = 0;  // zero-norm rows skipped by the cosine backward

  const Tensor& at(const std::string& name) const { return by_param.at(name); }
  bool all_finite() const;
};

// Backward pieces shared by the closed-form gradients below and by the tape.

// dL/dX for S = cos(X) given dL/dS. Zero rows receive zero gradient.
Tensor cosine_similarity_backward(const Tensor& x, const Tensor& d_sim, std::size_t* zero_rows = nullptr);

// For Y = X + X·Wᵀ: fills dL/dX and dL/dW from dL/dY.
void rotation_backward(const Tensor& x, const Tensor& w, const Tensor& d_out, Tensor* d_x, Tensor* d_w);

// Gradient of KL(softmax(t) || softmax(s)) w.r.t. s: softmax(s) - softmax(t).
std::vector<double> softmax_kl_backward(std::span<const double> teacher_raw, std::span<const double> student_raw);

// L_vis through rotation -> cosine -> MSE. Keys: "W" and "X" (X as N×d).
GradientBundle grad_visual_alignment(const FeatureGrid& x, const RotationParams& r, const SimilarityMatrix& expert);

// L_att w.r.t. the student scores. Key: "student".
GradientBundle grad_attention_alignment(const AttentionVector& teacher_raw, const AttentionVector& student_raw);

}  // namespace aligndistill

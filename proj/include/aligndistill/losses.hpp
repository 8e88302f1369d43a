#pragma once

#include <cstddef>
#include <vector>

#include "aligndistill/interp.hpp"
#include "aligndistill/tensor.hpp"

namespace aligndistill {

// Trainable d×d matrix W; tokens are transformed as x ↦ (I + W)·x.
struct RotationParams {
  Tensor w;

  static RotationParams zeros(std::size_t width) { return {Tensor::matrix(width, width)}; }
  std::size_t width() const { return w.rows(); }
};

struct SimilarityMatrix {
  Tensor s;                    // N×N cosine similarities
  std::size_t zero_rows = 0;   // rows with zero norm (cosine 0 off-diagonal, 1 on it)

  std::size_t size() const { return s.rows(); }
};

struct AttentionVector {
  std::vector<double> scores;
  bool normalized = false;

  std::size_t size() const { return scores.size(); }
};

struct DistillationWeights {
  double alpha = 1.0;  // weight of the similarity-structure loss
  double beta = 0.03;  // weight of the attention loss

  void validate() const;
};

// Row-major: out = X·(I + W)ᵀ, i.e. every token vector is multiplied by (I + W).
Tensor rotate_rows(const Tensor& x, const Tensor& w);
FeatureGrid rotate_features(const FeatureGrid& x, const RotationParams& r);

SimilarityMatrix similarity_matrix(const Tensor& rows);
SimilarityMatrix similarity_matrix(const FeatureGrid& grid);

// Mean squared difference of two similarity matrices.
double visual_alignment_loss(const SimilarityMatrix& expert, const SimilarityMatrix& student);

// Element-wise mean over heads of raw (pre-softmax) scores, H×N -> N.
AttentionVector average_heads(const Tensor& per_head);

// KL(softmax(teacher) || softmax(student)).
double attention_alignment_loss(const AttentionVector& teacher_raw, const AttentionVector& student_raw);

double combined_objective(double l_llm, double l_vis, double l_att, const DistillationWeights& w);

}  // namespace aligndistill

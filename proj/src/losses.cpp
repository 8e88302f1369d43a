#include "aligndistill/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace aligndistill {

void DistillationWeights::validate() const {
  if (!std::isfinite(alpha) || !std::isfinite(beta) || alpha < 0.0 || beta < 0.0)
    throw std::invalid_argument("distillation weights must be finite and non-negative");
}

Tensor rotate_rows(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || w.rows() != w.cols()) throw std::invalid_argument("rotation must be square");
  if (x.cols() != w.rows()) throw std::invalid_argument("rotation width does not match feature width");
  // x + x·Wᵀ keeps W = 0 an exact identity.
  Tensor out = matmul_nt(x.reshaped({x.size() / x.cols(), x.cols()}), w);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
  return out;
}

FeatureGrid rotate_features(const FeatureGrid& x, const RotationParams& r) {
  return FeatureGrid(x.shape(), rotate_rows(x.token_matrix(), r.w));
}

SimilarityMatrix similarity_matrix(const Tensor& rows) {
  if (rows.rank() != 2) throw std::invalid_argument("similarity_matrix: expected (N, k) rows");
  NormalizeStats stats;
  const Tensor unit = l2_normalize_rows(rows, &stats);
  SimilarityMatrix out{matmul_nt(unit, unit), stats.zero_rows};
  const std::size_t n = rows.rows();
  for (std::size_t i = 0; i < n; ++i) {
    // Exact symmetry and unit diagonal regardless of summation order.
    for (std::size_t j = 0; j < i; ++j) out.s(i, j) = out.s(j, i);
    out.s(i, i) = 1.0;
  }
  return out;
}

SimilarityMatrix similarity_matrix(const FeatureGrid& grid) { return similarity_matrix(grid.token_matrix()); }

double visual_alignment_loss(const SimilarityMatrix& expert, const SimilarityMatrix& student) {
  if (expert.s.dims() != student.s.dims())
    throw std::invalid_argument("visual_alignment_loss: similarity matrices differ in size");
  return mse(expert.s, student.s);
}

AttentionVector average_heads(const Tensor& per_head) {
  if (per_head.empty() || per_head.rank() != 2)
    throw std::invalid_argument("average_heads: need at least one head row");
  const std::size_t heads = per_head.rows(), n = per_head.cols();
  AttentionVector out{std::vector<double>(n, 0.0), false};
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) out.scores[i] += per_head(h, i);
  for (double& v : out.scores) v /= static_cast<double>(heads);
  return out;
}

double attention_alignment_loss(const AttentionVector& teacher_raw, const AttentionVector& student_raw) {
  if (teacher_raw.size() != student_raw.size())
    throw std::invalid_argument("attention_alignment_loss: length mismatch");
  const auto log_p = log_softmax(teacher_raw.scores);
  const auto log_q = log_softmax(student_raw.scores);
  double kl = 0.0;
  for (std::size_t i = 0; i < log_p.size(); ++i) kl += std::exp(log_p[i]) * (log_p[i] - log_q[i]);
  // Roundoff can leave a tiny negative value for near-identical distributions.
  return kl < 0.0 ? 0.0 : kl;
}

double combined_objective(double l_llm, double l_vis, double l_att, const DistillationWeights& w) {
  if (!std::isfinite(l_llm) || !std::isfinite(l_vis) || !std::isfinite(l_att))
    throw std::invalid_argument("combined_objective: non-finite loss");
  w.validate();
  return l_llm + w.alpha * l_vis + w.beta * l_att;
}

}  // namespace aligndistill

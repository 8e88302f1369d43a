#include "aligndistill/gradients.hpp"

#include <cmath>
#include <stdexcept>

namespace aligndistill {

bool GradientBundle::all_finite() const {
  if (!std::isfinite(loss)) return false;
  for (const auto& [name, g] : by_param)
    if (!g.all_finite()) return false;
  return true;
}

Tensor cosine_similarity_backward(const Tensor& x, const Tensor& d_sim, std::size_t* zero_rows) {
  const std::size_t n = x.rows(), k = x.cols();
  if (d_sim.rows() != n || d_sim.cols() != n)
    throw std::invalid_argument("cosine_similarity_backward: gradient must be N×N");

  std::vector<double> norms(n);
  Tensor unit = x;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (double v : x.row(i)) sq += v * v;
    norms[i] = std::sqrt(sq);
    if (norms[i] > 0.0)
      for (double& v : unit.row(i)) v /= norms[i];
  }

  // S = U·Uᵀ, so dL/dU = (G + Gᵀ)·U.
  Tensor sym = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sym(i, j) = d_sim(i, j) + d_sim(j, i);
  const Tensor d_unit = matmul(sym, unit);

  // Through u = x/|x|: dx = (du - (du·u) u) / |x|.
  Tensor d_x = Tensor::matrix(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    if (norms[i] == 0.0) {
      if (zero_rows) ++*zero_rows;
      continue;
    }
    double radial = 0.0;
    for (std::size_t c = 0; c < k; ++c) radial += d_unit(i, c) * unit(i, c);
    for (std::size_t c = 0; c < k; ++c) d_x(i, c) = (d_unit(i, c) - radial * unit(i, c)) / norms[i];
  }
  return d_x;
}

void rotation_backward(const Tensor& x, const Tensor& w, const Tensor& d_out, Tensor* d_x, Tensor* d_w) {
  if (d_x) {
    *d_x = matmul(d_out, w);
    for (std::size_t i = 0; i < d_x->size(); ++i) (*d_x)[i] += d_out[i];
  }
  if (d_w) *d_w = matmul_tn(d_out, x);
}

std::vector<double> softmax_kl_backward(std::span<const double> teacher_raw, std::span<const double> student_raw) {
  if (teacher_raw.size() != student_raw.size())
    throw std::invalid_argument("softmax_kl_backward: length mismatch");
  const auto p = softmax(teacher_raw);
  auto q = softmax(student_raw);
  for (std::size_t i = 0; i < q.size(); ++i) q[i] -= p[i];
  return q;
}

GradientBundle grad_visual_alignment(const FeatureGrid& x, const RotationParams& r, const SimilarityMatrix& expert) {
  const Tensor rows = x.token_matrix();
  const Tensor rotated = rotate_rows(rows, r.w);
  const SimilarityMatrix student = similarity_matrix(rotated);
  const std::size_t n = rows.rows();
  if (expert.size() != n) throw std::invalid_argument("grad_visual_alignment: expert matrix size mismatch");

  GradientBundle out;
  out.loss = visual_alignment_loss(expert, student);

  // d/dSx of mean((Se - Sx)^2).
  Tensor d_sim = Tensor::matrix(n, n);
  const double scale = 2.0 / static_cast<double>(n * n);
  for (std::size_t i = 0; i < d_sim.size(); ++i) d_sim[i] = scale * (student.s[i] - expert.s[i]);
  // The diagonal is pinned to 1 and carries no gradient.
  for (std::size_t i = 0; i < n; ++i) d_sim(i, i) = 0.0;

  const Tensor d_rot = cosine_similarity_backward(rotated, d_sim, &out.zero_rows);
  Tensor d_x, d_w;
  rotation_backward(rows, r.w, d_rot, &d_x, &d_w);
  out.by_param["W"] = std::move(d_w);
  out.by_param["X"] = std::move(d_x);
  return out;
}

GradientBundle grad_attention_alignment(const AttentionVector& teacher_raw, const AttentionVector& student_raw) {
  GradientBundle out;
  out.loss = attention_alignment_loss(teacher_raw, student_raw);
  out.by_param["student"] = Tensor::vector(softmax_kl_backward(teacher_raw.scores, student_raw.scores));
  return out;
}

}  // namespace aligndistill

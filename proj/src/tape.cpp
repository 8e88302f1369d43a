#include "aligndistill/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "aligndistill/gradients.hpp"
#include "aligndistill/losses.hpp"

namespace aligndistill {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::needs_grad() const { return tape_->needs_grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, true, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(Tensor value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& v : inputs) needs = needs || nodes_[v.id()].needs_grad;
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(backward) : nullptr});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Tensor& contribution) {
  Node& node = nodes_[id];
  if (!node.needs_grad) return;
  if (node.grad.empty()) {
    node.grad = contribution.reshaped(node.value.dims());
  } else {
    add_inplace(node.grad, contribution);
  }
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw std::invalid_argument("backward: variable belongs to another tape");
  if (nodes_[root.id()].value.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  for (auto& n : nodes_) n.grad = Tensor{};
  accumulate(root.id(), Tensor(nodes_[root.id()].value.dims(), 1.0));
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

namespace ops {

namespace {

Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(aligndistill::matmul(a.value(), b.value()), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, matmul_nt(g, tp.value(ib)));
    if (tp.needs_grad(ib)) tp.accumulate(ib, matmul_tn(tp.value(ia), g));
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(aligndistill::matmul_nt(a.value(), b.value()), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, aligndistill::matmul(g, tp.value(ib)));
    if (tp.needs_grad(ib)) tp.accumulate(ib, matmul_tn(g, tp.value(ia)));
  });
}

Var add(Var a, Var b) {
  if (a.value().size() != b.value().size()) throw std::invalid_argument("ops::add: size mismatch");
  Tensor out = a.value();
  add_inplace(out, b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->push(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    tp.accumulate(ia, tp.grad(self));
    tp.accumulate(ib, tp.grad(self));
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  const std::size_t ia = a.id();
  return a.tape()->push(std::move(out), {a}, [ia, s](Tape& tp, std::size_t self) {
    Tensor g = tp.grad(self);
    for (double& v : g.data()) v *= s;
    tp.accumulate(ia, g);
  });
}

Var rms_norm(Var x, double eps) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out = xv;
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (double v : xv.row(r)) sq += v * v;
    inv[r] = 1.0 / std::sqrt(sq / static_cast<double>(cols) + eps);
    for (double& v : out.row(r)) v *= inv[r];
  }
  const std::size_t ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix, inv = std::move(inv)](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& y = tp.value(self);
    const std::size_t cols = y.cols();
    Tensor dx = Tensor::matrix(y.rows(), cols);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g(r, c) * y(r, c);
      dot /= static_cast<double>(cols);
      for (std::size_t c = 0; c < cols; ++c) dx(r, c) = (g(r, c) - y(r, c) * dot) * inv[r];
    }
    tp.accumulate(ix, dx);
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  const std::size_t ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
    const Tensor& xv = tp.value(ix);
    Tensor g = tp.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      g[i] *= d;
    }
    tp.accumulate(ix, g);
  });
}

Var slice_cols(Var x, std::size_t first, std::size_t count) {
  const Tensor& xv = x.value();
  if (first + count > xv.cols()) throw std::invalid_argument("slice_cols: out of range");
  Tensor out = Tensor::matrix(xv.rows(), count);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = xv(r, first + c);
  const std::size_t ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix, first](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& xv = tp.value(ix);
    Tensor dx = Tensor::matrix(xv.rows(), xv.cols());
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) dx(r, first + c) = g(r, c);
    tp.accumulate(ix, dx);
  });
}

Var slice_rows(Var x, std::size_t first, std::size_t count) {
  const Tensor& xv = x.value();
  if (first + count > xv.rows()) throw std::invalid_argument("slice_rows: out of range");
  const std::size_t cols = xv.cols();
  Tensor out = Tensor::matrix(count, cols);
  std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(first * cols), count * cols, out.data().begin());
  const std::size_t ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix, first](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& xv = tp.value(ix);
    Tensor dx = Tensor::matrix(xv.rows(), xv.cols());
    std::copy(g.data().begin(), g.data().end(), dx.data().begin() + static_cast<std::ptrdiff_t>(first * xv.cols()));
    tp.accumulate(ix, dx);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.value().cols();
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, off + c) = v(r, c);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += v.cols();
  }
  return parts[0].tape()->push(std::move(out), parts, [ids, offsets](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.needs_grad(ids[k])) continue;
      const Tensor& v = tp.value(ids[k]);
      Tensor d = Tensor::matrix(v.rows(), v.cols());
      for (std::size_t r = 0; r < v.rows(); ++r)
        for (std::size_t c = 0; c < v.cols(); ++c) d(r, c) = g(r, offsets[k] + c);
      tp.accumulate(ids[k], d);
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.value().size() / cols;
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.value().size();
  }
  return parts[0].tape()->push(std::move(out), parts, [ids, offsets](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.needs_grad(ids[k])) continue;
      const Tensor& v = tp.value(ids[k]);
      Tensor d(v.dims());
      std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(offsets[k]), v.size(), d.data().begin());
      tp.accumulate(ids[k], d);
    }
  });
}

Var replace_rows(Var x, std::size_t first, Var y) {
  const Tensor& xv = x.value();
  const Tensor& yv = y.value();
  if (yv.cols() != xv.cols() || first + yv.rows() > xv.rows())
    throw std::invalid_argument("replace_rows: block does not fit");
  Tensor out = xv;
  const std::size_t cols = xv.cols();
  std::copy(yv.data().begin(), yv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(first * cols));
  const std::size_t ix = x.id(), iy = y.id();
  const std::size_t count = yv.rows();
  return x.tape()->push(std::move(out), {x, y}, [ix, iy, first, count](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const std::size_t cols = g.cols();
    const auto begin = static_cast<std::ptrdiff_t>(first * cols);
    const auto end = static_cast<std::ptrdiff_t>((first + count) * cols);
    if (tp.needs_grad(ix)) {
      Tensor dx = g;
      std::fill(dx.data().begin() + begin, dx.data().begin() + end, 0.0);
      tp.accumulate(ix, dx);
    }
    if (tp.needs_grad(iy)) {
      Tensor dy = Tensor::matrix(count, cols);
      std::copy(g.data().begin() + begin, g.data().begin() + end, dy.data().begin());
      tp.accumulate(iy, dy);
    }
  });
}

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out = Tensor::matrix(1, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += xv(r, c);
  for (double& v : out.data()) v /= static_cast<double>(rows);
  const std::size_t ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix, rows](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const std::size_t cols = g.cols();
    Tensor dx = Tensor::matrix(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) dx(r, c) = g[c] / static_cast<double>(rows);
    tp.accumulate(ix, dx);
  });
}

Var masked_softmax(Var scores, const Tensor& mask) {
  const Tensor& sv = scores.value();
  if (!mask.same_dims(sv)) throw std::invalid_argument("masked_softmax: mask shape mismatch");
  const std::size_t rows = sv.rows(), cols = sv.cols();
  Tensor out = Tensor::matrix(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double hi = -INFINITY;
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask(r, c) == 0.0) continue;
      any = true;
      // NaN scores propagate so the loss check downstream sees them.
      hi = std::isnan(sv(r, c)) || std::isnan(hi) ? NAN : std::max(hi, sv(r, c));
    }
    if (!any) throw std::invalid_argument("masked_softmax: fully masked row");
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask(r, c) == 0.0) continue;
      out(r, c) = std::exp(sv(r, c) - hi);
      total += out(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c) out(r, c) /= total;
  }
  const std::size_t is = scores.id();
  return scores.tape()->push(std::move(out), {scores}, [is](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& p = tp.value(self);
    Tensor ds = Tensor::matrix(p.rows(), p.cols());
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) dot += g(r, c) * p(r, c);
      for (std::size_t c = 0; c < p.cols(); ++c) ds(r, c) = p(r, c) * (g(r, c) - dot);
    }
    tp.accumulate(is, ds);
  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor& lv = logits.value();
  const std::size_t rows = lv.rows(), vocab = lv.cols();
  if (targets.size() != rows) throw std::invalid_argument("cross_entropy: one target per logit row required");
  Tensor probs = Tensor::matrix(rows, vocab);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = targets[r];
    if (y < 0 || static_cast<std::size_t>(y) >= vocab) throw std::invalid_argument("cross_entropy: target out of range");
    const auto row = lv.row(r);
    if (!std::all_of(row.begin(), row.end(), [](double v) { return std::isfinite(v); })) {
      // Reported as a NaN loss; the training step rejects it.
      total = std::numeric_limits<double>::quiet_NaN();
      for (std::size_t c = 0; c < vocab; ++c) probs(r, c) = total;
      continue;
    }
    const auto logp = log_softmax(row);
    total -= logp[static_cast<std::size_t>(y)];
    for (std::size_t c = 0; c < vocab; ++c) probs(r, c) = std::exp(logp[c]);
  }
  std::vector<int> ys(targets.begin(), targets.end());
  const std::size_t il = logits.id();
  return logits.tape()->push(scalar(total / static_cast<double>(rows)), {logits},
                             [il, ys = std::move(ys), probs = std::move(probs)](Tape& tp, std::size_t self) {
                               const double g = tp.grad(self)[0] / static_cast<double>(probs.rows());
                               Tensor d = probs;
                               for (std::size_t r = 0; r < d.rows(); ++r) d(r, static_cast<std::size_t>(ys[r])) -= 1.0;
                               for (double& v : d.data()) v *= g;
                               tp.accumulate(il, d);
                             });
}

Var rotate(Var x, Var w) {
  const std::size_t ix = x.id(), iw = w.id();
  return x.tape()->push(rotate_rows(x.value(), w.value()), {x, w}, [ix, iw](Tape& tp, std::size_t self) {
    Tensor dx, dw;
    rotation_backward(tp.value(ix), tp.value(iw), tp.grad(self), tp.needs_grad(ix) ? &dx : nullptr,
                      tp.needs_grad(iw) ? &dw : nullptr);
    if (tp.needs_grad(ix)) tp.accumulate(ix, dx);
    if (tp.needs_grad(iw)) tp.accumulate(iw, dw);
  });
}

Var cosine_similarity(Var x) {
  const std::size_t ix = x.id();
  return x.tape()->push(similarity_matrix(x.value()).s, {x}, [ix](Tape& tp, std::size_t self) {
    Tensor g = tp.grad(self);
    for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) = 0.0;
    tp.accumulate(ix, cosine_similarity_backward(tp.value(ix), g));
  });
}

Var mse_to(Var x, const Tensor& target) {
  const Tensor& xv = x.value();
  if (xv.size() != target.size()) throw std::invalid_argument("mse_to: size mismatch");
  const double n = static_cast<double>(xv.size());
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) total += (xv[i] - target[i]) * (xv[i] - target[i]);
  const std::size_t ix = x.id();
  return x.tape()->push(scalar(total / n), {x}, [ix, target, n](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    const Tensor& xv = tp.value(ix);
    Tensor d(xv.dims());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = g * 2.0 * (xv[i] - target[i]) / n;
    tp.accumulate(ix, d);
  });
}

Var softmax_kl(std::span<const double> teacher_raw, Var student_raw) {
  const Tensor& sv = student_raw.value();
  if (sv.size() != teacher_raw.size()) throw std::invalid_argument("softmax_kl: length mismatch");
  AttentionVector teacher{std::vector<double>(teacher_raw.begin(), teacher_raw.end()), false};
  AttentionVector student{sv.values(), false};
  if (!sv.all_finite()) {
    const std::size_t is = student_raw.id();
    return student_raw.tape()->push(scalar(std::numeric_limits<double>::quiet_NaN()), {student_raw},
                                    [is](Tape& tp, std::size_t) {
                                      tp.accumulate(is, Tensor(tp.value(is).dims(), std::numeric_limits<double>::quiet_NaN()));
                                    });
  }
  const double kl = attention_alignment_loss(teacher, student);
  const std::size_t is = student_raw.id();
  return student_raw.tape()->push(scalar(kl), {student_raw},
                                  [is, teacher = std::move(teacher.scores)](Tape& tp, std::size_t self) {
                                    const double g = tp.grad(self)[0];
                                    const Tensor& sv = tp.value(is);
                                    auto d = softmax_kl_backward(teacher, sv.data());
                                    Tensor dt(sv.dims(), std::move(d));
                                    for (double& v : dt.data()) v *= g;
                                    tp.accumulate(is, dt);
                                  });
}

}  // namespace ops
}  // namespace aligndistill

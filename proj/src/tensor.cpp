#include "aligndistill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>

namespace aligndistill {

namespace {

std::size_t element_count(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) {
    if (d == 0) throw std::invalid_argument("tensor dims must be positive");
    n *= d;
  }
  return n;
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw std::invalid_argument(std::string(what) + ": expected a rank-2 tensor");
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> dims, double fill)
    : dims_(std::move(dims)), data_(element_count(dims_), fill) {}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  if (element_count(dims_) != data_.size()) {
    throw std::invalid_argument("tensor data length does not match dims");
  }
}

Tensor Tensor::vector(std::span<const double> values) {
  return Tensor({values.size()}, std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (dims_.size() == 1) return 1;
  if (dims_.size() != 2) throw std::logic_error("rows() on a tensor that is not rank 1 or 2");
  return dims_[0];
}

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

Tensor Tensor::reshaped(std::vector<std::size_t> dims) const {
  return Tensor(std::move(dims), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// Element-wise multiply then add in a fixed order; the AVX2 clone only widens
// the inner loop, so both clones produce identical bits.
#if defined(__GNUC__) && defined(__x86_64__) && !defined(__clang__)
#define AD_KERNEL __attribute__((target_clones("avx2", "default")))
#else
#define AD_KERNEL
#endif

namespace {

typedef double v4d __attribute__((vector_size(32), aligned(8)));

// out[i][j] = sum over p of a(i, p) * b[p][j], accumulated in order of p.
// a(i, p) is pa[i * as + p * ps]. Each output lane keeps its own running sum
// in a register, so the result matches the plain triple loop bit for bit.
AD_KERNEL void gemm_rows(const double* __restrict pa, std::size_t as, std::size_t ps,
                         const double* __restrict pb, double* __restrict po, std::size_t n,
                         std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = pa + i * as;
    double* orow = po + i * m;
    std::size_t j = 0;
    for (; j + 8 <= m; j += 8) {
      v4d acc0 = {0, 0, 0, 0}, acc1 = {0, 0, 0, 0};
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p * ps];
        const double* brow = pb + p * m + j;
        acc0 += av * *reinterpret_cast<const v4d*>(brow);
        acc1 += av * *reinterpret_cast<const v4d*>(brow + 4);
      }
      *reinterpret_cast<v4d*>(orow + j) = acc0;
      *reinterpret_cast<v4d*>(orow + j + 4) = acc1;
    }
    for (; j + 4 <= m; j += 4) {
      v4d acc = {0, 0, 0, 0};
      for (std::size_t p = 0; p < k; ++p)
        acc += arow[p * ps] * *reinterpret_cast<const v4d*>(pb + p * m + j);
      *reinterpret_cast<v4d*>(orow + j) = acc;
    }
    for (; j < m; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p * ps] * pb[p * m + j];
      orow[j] = acc;
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) throw std::invalid_argument("matmul: inner dimensions differ");
  Tensor out = Tensor::matrix(n, m);
  gemm_rows(a.data().data(), k, 1, b.data().data(), out.data().data(), n, k, m);
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (b.cols() != a.cols()) throw std::invalid_argument("matmul_nt: inner dimensions differ");
  // Same accumulation order as a dot product per entry, but the inner loop
  // runs over contiguous output columns.
  return matmul(a, transpose(b));
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  if (b.rows() != k) throw std::invalid_argument("matmul_tn: inner dimensions differ");
  Tensor out = Tensor::matrix(n, m);
  gemm_rows(a.data().data(), 1, n, b.data().data(), out.data().data(), n, k, m);
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out = Tensor::matrix(m, n);
  const double* pa = a.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) po[j * n + i] = pa[i * m + j];
  return out;
}

void add_inplace(Tensor& dst, const Tensor& src, double scale) {
  if (dst.size() != src.size()) throw std::invalid_argument("add_inplace: size mismatch");
  auto d = dst.data();
  auto s = src.data();
  if (scale == 1.0) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  } else {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
  }
}

std::vector<double> softmax(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("softmax: empty input");
  double hi = -INFINITY;
  for (double v : scores) {
    if (!std::isfinite(v)) throw std::invalid_argument("softmax: non-finite input");
    hi = std::max(hi, v);
  }
  std::vector<double> out(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - hi);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

std::vector<double> log_softmax(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("log_softmax: empty input");
  double hi = -INFINITY;
  for (double v : scores) {
    if (!std::isfinite(v)) throw std::invalid_argument("log_softmax: non-finite input");
    hi = std::max(hi, v);
  }
  double total = 0.0;
  for (double v : scores) total += std::exp(v - hi);
  const double log_total = std::log(total);
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] - hi - log_total;
  return out;
}

Tensor l2_normalize_rows(const Tensor& t, NormalizeStats* stats) {
  if (t.rank() == 0) throw std::invalid_argument("l2_normalize_rows: empty tensor");
  Tensor out = t;
  const std::size_t width = t.cols();
  const std::size_t count = t.size() / width;
  auto data = out.data();
  for (std::size_t r = 0; r < count; ++r) {
    auto row = data.subspan(r * width, width);
    double sq = 0.0;
    for (double v : row) sq += v * v;
    if (sq == 0.0) {
      if (stats) ++stats->zero_rows;
      continue;
    }
    const double norm = std::sqrt(sq);
    for (double& v : row) v /= norm;
  }
  return out;
}

double mse(const Tensor& a, const Tensor& b) {
  if (!a.same_dims(b)) throw std::invalid_argument("mse: dimension mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    total += diff * diff;
  }
  return total / static_cast<double>(a.size());
}

std::uint64_t checksum(std::span<const double> values, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::uint64_t checksum(const Tensor& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::size_t d : t.dims()) {
    const double as_double = static_cast<double>(d);
    h = checksum(std::span<const double>(&as_double, 1), h);
  }
  return checksum(t.data(), h);
}

}  // namespace aligndistill

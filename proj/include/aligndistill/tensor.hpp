#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace aligndistill {

// Dense row-major tensor of doubles. Rank-2 accessors are provided because
// almost every consumer works on (rows, cols) matrices.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0);
  Tensor(std::vector<std::size_t> dims, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor vector(std::span<const double> values);
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Rank-2 view. A rank-1 tensor reads as a single row.
  std::size_t rows() const;
  std::size_t cols() const { return dims_.empty() ? 0 : dims_.back(); }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  // Same data, new dims; element counts must agree.
  Tensor reshaped(std::vector<std::size_t> dims) const;

  bool all_finite() const;
  bool same_dims(const Tensor& other) const { return dims_ == other.dims_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<double> data_;
};

// Matrix helpers used by the losses, the model and the autodiff tape.
Tensor matmul(const Tensor& a, const Tensor& b);     // a · b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a · bᵀ
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // aᵀ · b
Tensor transpose(const Tensor& a);
void add_inplace(Tensor& dst, const Tensor& src, double scale = 1.0);

// Numerically stable softmax (max subtraction). Throws std::invalid_argument
// on empty or non-finite input.
std::vector<double> softmax(std::span<const double> scores);
std::vector<double> log_softmax(std::span<const double> scores);

struct NormalizeStats {
  std::size_t zero_rows = 0;
};

// Unit-normalizes every row of a rank-2 tensor (or the last axis of any rank
// >= 1 tensor). Rows of exact zeros are left untouched and counted.
Tensor l2_normalize_rows(const Tensor& t, NormalizeStats* stats = nullptr);

// Mean squared error over all elements; dims must match.
double mse(const Tensor& a, const Tensor& b);

// FNV-1a over the IEEE-754 bytes of the values; used for checksums and
// golden hashes of traces.
std::uint64_t checksum(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t checksum(const Tensor& t, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace aligndistill

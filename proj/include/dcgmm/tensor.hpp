// Dense row-major f64 tensor plus the raw kernels the autodiff engine is
// built on. Rank 1 and 2 cover everything in this library; scalars are
// rank-1 tensors with a single element.
//
// Kernels keep a fixed per-element reduction order, so results are bitwise
// independent of the OpenMP thread count (threads only split output rows).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dcgmm/errors.hpp"

namespace dcgmm {

class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  [[nodiscard]] const std::vector<std::size_t> &shape() const { return shape_; }
  [[nodiscard]] std::size_t ndim() const { return shape_.size(); }
  [[nodiscard]] std::size_t numel() const { return data_.size(); }

  [[nodiscard]] std::size_t rows() const {
    require_ndim(2, "rows()");
    return shape_[0];
  }
  [[nodiscard]] std::size_t cols() const {
    require_ndim(2, "cols()");
    return shape_[1];
  }

  double *data() { return data_.data(); }
  [[nodiscard]] const double *data() const { return data_.data(); }
  std::vector<double> &vec() { return data_; }
  [[nodiscard]] const std::vector<double> &vec() const { return data_; }

  double &operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double &at(std::size_t r, std::size_t c) {
    return data_[r * shape_[1] + c];
  }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  // Scalar extraction; valid only for single-element tensors.
  [[nodiscard]] double item() const {
    if (numel() != 1) {
      throw ShapeError("item() requires a scalar, got shape " +
                       shape_str(shape_));
    }
    return data_[0];
  }

  [[nodiscard]] bool same_shape(const Tensor &o) const {
    return shape_ == o.shape_;
  }

  [[nodiscard]] bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  static std::string shape_str(const std::vector<std::size_t> &s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) os << ", ";
      os << s[i];
    }
    os << "]";
    return os.str();
  }

  [[nodiscard]] std::string shape_str() const { return shape_str(shape_); }

private:
  static std::size_t checked_numel(const std::vector<std::size_t> &shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

  void require_ndim(std::size_t nd, const char *what) const {
    if (shape_.size() != nd) {
      throw ShapeError(std::string(what) + " requires rank " +
                       std::to_string(nd) + ", got shape " + shape_str(shape_));
    }
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

namespace kernels {

inline void require_matrix(const Tensor &t, const char *name) {
  if (t.ndim() != 2) {
    throw ShapeError(std::string(name) + " must be rank 2, got shape " +
                     t.shape_str());
  }
}

// C = A * B
inline Tensor matmul(const Tensor &a, const Tensor &b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dimensions differ: " + a.shape_str() +
                     " vs " + b.shape_str());
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor c({n, m});
  const double *pa = a.data();
  const double *pb = b.data();
  double *pc = c.data();
#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double *crow = pc + i * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double *brow = pb + kk * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// C = A^T * B, with A (n x r), B (n x c) -> (r x c)
inline Tensor matmul_tn(const Tensor &a, const Tensor &b) {
  require_matrix(a, "matmul_tn lhs");
  require_matrix(b, "matmul_tn rhs");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn leading dimensions differ: " + a.shape_str() +
                     " vs " + b.shape_str());
  }
  const std::size_t n = a.rows(), r = a.cols(), m = b.cols();
  Tensor c({r, m});
  const double *pa = a.data();
  const double *pb = b.data();
  double *pc = c.data();
#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(r); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double *crow = pc + i * m;
    for (std::size_t kk = 0; kk < n; ++kk) {
      const double av = pa[kk * r + i];
      const double *brow = pb + kk * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// C = A * B^T, with A (n x k), B (m x k) -> (n x m)
inline Tensor matmul_nt(const Tensor &a, const Tensor &b) {
  require_matrix(a, "matmul_nt lhs");
  require_matrix(b, "matmul_nt rhs");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt trailing dimensions differ: " + a.shape_str() +
                     " vs " + b.shape_str());
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Tensor c({n, m});
  const double *pa = a.data();
  const double *pb = b.data();
  double *pc = c.data();
#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double *arow = pa + i * k;
    double *crow = pc + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double *brow = pb + j * k;
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] = acc;
    }
  }
  return c;
}

inline Tensor transpose(const Tensor &a) {
  require_matrix(a, "transpose");
  const std::size_t n = a.rows(), m = a.cols();
  Tensor t({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

} // namespace kernels
} // namespace dcgmm

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace fang {

using Index = std::size_t;
using IndexList = std::vector<Index>;
using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(Index rows, Index cols, double fill = 0.0);
  Matrix(Index rows, Index cols, std::vector<double> data);

  static Matrix identity(Index n);
  static Matrix diagonal(std::span<const double> diag);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(Index r, Index c) { return data_[r * cols_ + c]; }
  double operator()(Index r, Index c) const { return data_[r * cols_ + c]; }

  std::span<double> row(Index r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(Index r) const { return {data_.data() + r * cols_, cols_}; }
  Vector column(Index c) const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  bool all_finite() const;
  Matrix transpose() const;

  bool operator==(const Matrix& other) const = default;

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  std::vector<double> data_;
};

// C = A·B. Each output row is accumulated in a fixed order, so results do not
// depend on the worker count.
Matrix matmul(const Matrix& a, const Matrix& b);
// A·Bᵀ without materializing the transpose.
Matrix matmul_bt(const Matrix& a, const Matrix& b);
// Aᵀ·B without materializing the transpose.
Matrix matmul_at(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);

Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);

Matrix select_rows(const Matrix& a, std::span<const Index> rows);
Matrix select_columns(const Matrix& a, std::span<const Index> cols);
Matrix select_block(const Matrix& a, std::span<const Index> rows, std::span<const Index> cols);
Matrix hconcat(const Matrix& a, const Matrix& b);

double trace(const Matrix& a);
double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
double mean_diagonal(const Matrix& a);

// (H + lambda·mean(diag H)·I)^-1 through a Cholesky factorization. `context`
// (layer/group name) is included in the error message on failure.
Matrix sym_inverse_damped(const Matrix& h, double lambda, std::string_view context = {});
// Plain SPD inverse (no damping); throws SingularityError when not PD.
Matrix spd_inverse(const Matrix& h, std::string_view context = {});

struct EigenPairs {
  Vector values;   // descending
  Matrix vectors;  // n×k, column i pairs with values[i]
};

// Top-k eigenpairs of a symmetric matrix. Each eigenvector is sign-normalized
// so that its largest-magnitude component is positive.
EigenPairs eigh_topk(const Matrix& s, Index k);

}  // namespace fang

#include "fang/numcore.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <string>

#include "fang/errors.hpp"
#include "fang/parallel.hpp"

namespace fang {

namespace {

using EigenMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const EigenMat> as_eigen(const Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()),
          static_cast<Eigen::Index>(m.cols())};
}

Matrix from_eigen(const EigenMat& e) {
  Matrix out(static_cast<Index>(e.rows()), static_cast<Index>(e.cols()));
  std::copy(e.data(), e.data() + e.size(), out.data().begin());
  return out;
}

void require_square(const Matrix& m, const char* op) {
  if (m.rows() != m.cols()) {
    throw DimensionError(std::string(op) + ": expected square matrix, got " +
                         std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

std::string with_context(std::string msg, std::string_view context) {
  if (!context.empty()) {
    msg += " [";
    msg += context;
    msg += "]";
  }
  return msg;
}

Matrix symmetrized(const EigenMat& e) {
  EigenMat s = 0.5 * (e + e.transpose());
  return from_eigen(s);
}

}  // namespace

Matrix::Matrix(Index rows, Index cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(Index rows, Index cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows_) + "x" +
                         std::to_string(cols_));
  }
}

Matrix Matrix::identity(Index n) {
  Matrix m(n, n);
  for (Index i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (Index i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const Index r = rows.size();
  const Index c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Vector Matrix::column(Index c) const {
  Vector out(rows_);
  for (Index r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (Index r = 0; r < rows_; ++r)
    for (Index c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.rows()) + ")");
  }
  Matrix c(a.rows(), b.cols());
  const Index n = b.cols();
  parallel_for(a.rows(), [&](Index i) {
    auto out = c.row(i);
    const auto arow = a.row(i);
    for (Index j = 0; j < a.cols(); ++j) {
      const double aij = arow[j];
      if (aij == 0.0) continue;
      const auto brow = b.row(j);
      for (Index k = 0; k < n; ++k) out[k] += aij * brow[k];
    }
  });
  return c;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_bt: inner dimensions differ (" + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.cols()) + ")");
  }
  Matrix c(a.rows(), b.rows());
  parallel_for(a.rows(), [&](Index i) {
    const auto arow = a.row(i);
    for (Index k = 0; k < b.rows(); ++k) {
      const auto brow = b.row(k);
      double acc = 0.0;
      for (Index j = 0; j < a.cols(); ++j) acc += arow[j] * brow[j];
      c(i, k) = acc;
    }
  });
  return c;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_at: inner dimensions differ (" + std::to_string(a.rows()) +
                         " vs " + std::to_string(b.rows()) + ")");
  }
  Matrix c(a.cols(), b.cols());
  parallel_for(a.cols(), [&](Index i) {
    auto out = c.row(i);
    for (Index j = 0; j < a.rows(); ++j) {
      const double aji = a(j, i);
      if (aji == 0.0) continue;
      const auto brow = b.row(j);
      for (Index k = 0; k < b.cols(); ++k) out[k] += aji * brow[k];
    }
  });
  return c;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw DimensionError("matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (Index i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    double acc = 0.0;
    for (Index j = 0; j < a.cols(); ++j) acc += arow[j] * x[j];
    y[i] = acc;
  }
  return y;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix c = a;
  auto cd = c.data();
  const auto bd = b.data();
  for (Index i = 0; i < cd.size(); ++i) cd[i] += bd[i];
  return c;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix c = a;
  auto cd = c.data();
  const auto bd = b.data();
  for (Index i = 0; i < cd.size(); ++i) cd[i] -= bd[i];
  return c;
}

Matrix scale(const Matrix& a, double s) {
  Matrix c = a;
  for (double& v : c.data()) v *= s;
  return c;
}

Matrix select_rows(const Matrix& a, std::span<const Index> rows) {
  Matrix out(rows.size(), a.cols());
  for (Index i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.rows()) throw DimensionError("select_rows: index out of range");
    std::copy(a.row(rows[i]).begin(), a.row(rows[i]).end(), out.row(i).begin());
  }
  return out;
}

Matrix select_columns(const Matrix& a, std::span<const Index> cols) {
  Matrix out(a.rows(), cols.size());
  for (Index c : cols) {
    if (c >= a.cols()) throw DimensionError("select_columns: index out of range");
  }
  for (Index r = 0; r < a.rows(); ++r)
    for (Index j = 0; j < cols.size(); ++j) out(r, j) = a(r, cols[j]);
  return out;
}

Matrix select_block(const Matrix& a, std::span<const Index> rows, std::span<const Index> cols) {
  return select_columns(select_rows(a, rows), cols);
}

Matrix hconcat(const Matrix& a, const Matrix& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.rows() != b.rows()) throw DimensionError("hconcat: row counts differ");
  Matrix out(a.rows(), a.cols() + b.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    std::copy(a.row(r).begin(), a.row(r).end(), out.row(r).begin());
    std::copy(b.row(r).begin(), b.row(r).end(), out.row(r).begin() + a.cols());
  }
  return out;
}

double trace(const Matrix& a) {
  require_square(a, "trace");
  double t = 0.0;
  for (Index i = 0; i < a.rows(); ++i) t += a(i, i);
  return t;
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  const auto ad = a.data();
  const auto bd = b.data();
  for (Index i = 0; i < ad.size(); ++i) m = std::max(m, std::abs(ad[i] - bd[i]));
  return m;
}

double mean_diagonal(const Matrix& a) {
  require_square(a, "mean_diagonal");
  if (a.rows() == 0) return 0.0;
  return trace(a) / static_cast<double>(a.rows());
}

Matrix sym_inverse_damped(const Matrix& h, double lambda, std::string_view context) {
  require_square(h, "sym_inverse_damped");
  if (!(lambda >= 0.0)) {
    throw ParameterError(with_context("sym_inverse_damped: damping must be >= 0", context));
  }
  if (h.rows() == 0) return {};
  EigenMat damped = as_eigen(h);
  const double shift = lambda * mean_diagonal(h);
  damped.diagonal().array() += shift;
  Eigen::LLT<EigenMat> llt(damped);
  if (llt.info() != Eigen::Success) {
    throw SingularityError(with_context(
        "Hessian is not positive definite after damping (lambda=" + std::to_string(lambda) + ")",
        context));
  }
  EigenMat inv = llt.solve(EigenMat::Identity(damped.rows(), damped.cols()));
  Matrix out = symmetrized(inv);
  if (!out.all_finite()) {
    throw SingularityError(with_context("damped Hessian inverse is not finite", context));
  }
  return out;
}

Matrix spd_inverse(const Matrix& h, std::string_view context) {
  return sym_inverse_damped(h, 0.0, context);
}

EigenPairs eigh_topk(const Matrix& s, Index k) {
  require_square(s, "eigh_topk");
  if (k > s.rows()) {
    throw DimensionError("eigh_topk: k=" + std::to_string(k) + " exceeds matrix order " +
                         std::to_string(s.rows()));
  }
  const Index n = s.rows();
  EigenPairs out{Vector(k), Matrix(n, k)};
  if (k == 0) return out;
  EigenMat sym = as_eigen(s);
  sym = 0.5 * (sym + sym.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<EigenMat> solver(sym);
  if (solver.info() != Eigen::Success) {
    throw NumericalError("eigh_topk: eigen decomposition did not converge");
  }
  const auto& values = solver.eigenvalues();
  const auto& vectors = solver.eigenvectors();
  for (Index i = 0; i < k; ++i) {
    const Eigen::Index src = static_cast<Eigen::Index>(n - 1 - i);
    out.values[i] = values(src);
    Index pivot = 0;
    for (Index r = 1; r < n; ++r) {
      if (std::abs(vectors(r, src)) > std::abs(vectors(pivot, src))) pivot = r;
    }
    const double sign = vectors(pivot, src) < 0.0 ? -1.0 : 1.0;
    for (Index r = 0; r < n; ++r) out.vectors(r, i) = sign * vectors(r, src);
  }
  return out;
}

}  // namespace fang

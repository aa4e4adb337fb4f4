#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <vector>

namespace pscsim::orbit {

/// Small dense row-major matrix. Sizes here stay below 64 x 64.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(const std::vector<double>& d);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  Matrix transpose() const;
  Matrix operator*(const Matrix& o) const;
  std::vector<double> operator*(const std::vector<double>& v) const;
  Matrix operator-(const Matrix& o) const;

  double norm1() const;    // max column sum
  double max_abs() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

class SingularResponse : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kMaxCondition = 1e10;

/// Moore-Penrose pseudo-inverse of a full-column-rank R: solves
/// (R^T R) P = R^T by Gauss-Jordan elimination with partial pivoting.
/// Throws SingularResponse when the 1-norm condition estimate of R^T R
/// exceeds kMaxCondition.
Matrix pinv(const Matrix& r);

/// 1-norm condition number of a square matrix; infinity when singular.
double condition_1(const Matrix& a);

}  // namespace pscsim::orbit

#include "pscsim/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace pscsim::orbit {

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw std::invalid_argument("ragged matrix initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(const std::vector<double>& d) {
  Matrix m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix Matrix::operator*(const Matrix& o) const {
  if (cols_ != o.rows_) throw std::invalid_argument("matrix product: dimension mismatch");
  Matrix out(rows_, o.cols_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t k = 0; k < cols_; ++k) {
      const double a = (*this)(r, k);
      if (a == 0.0) continue;
      for (std::size_t c = 0; c < o.cols_; ++c) out(r, c) += a * o(k, c);
    }
  return out;
}

std::vector<double> Matrix::operator*(const std::vector<double>& v) const {
  if (cols_ != v.size()) throw std::invalid_argument("matrix-vector product: dimension mismatch");
  std::vector<double> out(rows_, 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols_; ++c) acc += (*this)(r, c) * v[c];
    out[r] = acc;
  }
  return out;
}

Matrix Matrix::operator-(const Matrix& o) const {
  if (rows_ != o.rows_ || cols_ != o.cols_) throw std::invalid_argument("matrix difference: dimension mismatch");
  Matrix out(rows_, cols_);
  for (std::size_t i = 0; i < data_.size(); ++i) out.data_[i] = data_[i] - o.data_[i];
  return out;
}

double Matrix::norm1() const {
  double best = 0.0;
  for (std::size_t c = 0; c < cols_; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < rows_; ++r) s += std::abs((*this)(r, c));
    best = std::max(best, s);
  }
  return best;
}

double Matrix::max_abs() const {
  double best = 0.0;
  for (double v : data_) best = std::max(best, std::abs(v));
  return best;
}

namespace {

/// Reduces [A | B] in place so that A becomes the identity. Returns false
/// when a pivot vanishes.
bool gauss_jordan(Matrix& a, Matrix& b) {
  const std::size_t n = a.rows();
  const double scale = std::max(a.max_abs(), std::numeric_limits<double>::min());
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
    if (std::abs(a(piv, col)) <= scale * 1e-15) return false;
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a(piv, c), a(col, c));
      for (std::size_t c = 0; c < b.cols(); ++c) std::swap(b(piv, c), b(col, c));
    }
    const double inv = 1.0 / a(col, col);
    for (std::size_t c = 0; c < n; ++c) a(col, c) *= inv;
    for (std::size_t c = 0; c < b.cols(); ++c) b(col, c) *= inv;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a(r, col);
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) a(r, c) -= f * a(col, c);
      for (std::size_t c = 0; c < b.cols(); ++c) b(r, c) -= f * b(col, c);
    }
  }
  return true;
}

}  // namespace

double condition_1(const Matrix& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("condition_1: matrix must be square");
  Matrix work = a;
  Matrix inv = Matrix::identity(a.rows());
  if (!gauss_jordan(work, inv)) return std::numeric_limits<double>::infinity();
  return a.norm1() * inv.norm1();
}

Matrix pinv(const Matrix& r) {
  if (r.rows() == 0 || r.cols() == 0) throw SingularResponse("singular_response: empty response matrix");
  if (r.rows() < r.cols())
    throw SingularResponse("singular_response: fewer BPMs than correctors");
  const Matrix rt = r.transpose();
  const Matrix a = rt * r;
  const std::size_t n = a.rows();

  // one elimination yields both (R^T R)^-1, for the condition estimate, and P
  Matrix work = a;
  Matrix rhs(n, n + rt.cols());
  for (std::size_t i = 0; i < n; ++i) {
    rhs(i, i) = 1.0;
    for (std::size_t c = 0; c < rt.cols(); ++c) rhs(i, n + c) = rt(i, c);
  }
  if (!gauss_jordan(work, rhs)) throw SingularResponse("singular_response: R^T R is singular");

  Matrix inv(n, n);
  Matrix p(n, rt.cols());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < n; ++c) inv(i, c) = rhs(i, c);
    for (std::size_t c = 0; c < rt.cols(); ++c) p(i, c) = rhs(i, n + c);
  }
  const double cond = a.norm1() * inv.norm1();
  if (!(cond < kMaxCondition))
    throw SingularResponse("singular_response: condition estimate " + std::to_string(cond));
  return p;
}

}  // namespace pscsim::orbit

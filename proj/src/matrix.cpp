#include "cqs/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace cqs {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch, " + a.shape_str() +
                                " vs " + b.shape_str());
  }
}

}  // namespace

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Matrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("from_rows: ragged rows");
    std::size_t j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

bool Matrix::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Matrix::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dims differ, " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i);
    double* orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix matmul_abt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_abt: inner dims differ, " + a.shape_str() + " vs " +
                                b.shape_str() + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix matmul_atb(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_atb: inner dims differ, " + a.shape_str() + "^T vs " +
                                b.shape_str());
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* arow = a.row(k);
    const double* brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

Matrix transposed(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

void add_in_place(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add_in_place");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

void scale_in_place(Matrix& a, double s) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] *= s;
}

std::vector<double> column_sums(const Matrix& a) {
  std::vector<double> sums(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* row = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) sums[j] += row[j];
  }
  return sums;
}

Matrix linear(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  if (x.cols() != w.rows()) {
    throw std::invalid_argument("linear: x is " + x.shape_str() + " but w is " + w.shape_str());
  }
  if (b.size() != w.cols()) {
    throw std::invalid_argument("linear: bias length " + std::to_string(b.size()) +
                                " but w is " + w.shape_str());
  }
  Matrix out(x.rows(), w.cols());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double* orow = out.row(i);
    for (std::size_t j = 0; j < out.cols(); ++j) orow[j] = b[j];
  }
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* xrow = x.row(i);
    double* orow = out.row(i);
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const double xik = xrow[k];
      if (xik == 0.0) continue;
      const double* wrow = w.row(k);
      for (std::size_t j = 0; j < w.cols(); ++j) orow[j] += xik * wrow[j];
    }
  }
  return out;
}

LinearGrads linear_backward(const Matrix& x, const Matrix& w, const Matrix& d_out) {
  if (d_out.rows() != x.rows() || d_out.cols() != w.cols()) {
    throw std::invalid_argument("linear_backward: d_out is " + d_out.shape_str() +
                                ", expected " + std::to_string(x.rows()) + "x" +
                                std::to_string(w.cols()));
  }
  LinearGrads g;
  g.d_x = matmul_abt(d_out, w);    // d_out * w^T
  g.d_w = matmul_atb(x, d_out);    // x^T * d_out
  g.d_b = column_sums(d_out);
  return g;
}

Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* xrow = x.row(i);
    double* orow = out.row(i);
    double maxv = xrow[0];
    for (std::size_t j = 1; j < x.cols(); ++j) maxv = std::max(maxv, xrow[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      orow[j] = std::exp(xrow[j] - maxv);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < x.cols(); ++j) orow[j] /= sum;
  }
  return out;
}

Matrix softmax_rows_backward(const Matrix& y, const Matrix& d_y) {
  require_same_shape(y, d_y, "softmax_rows_backward");
  Matrix d_x(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const double* yrow = y.row(i);
    const double* drow = d_y.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < y.cols(); ++j) dot += yrow[j] * drow[j];
    double* orow = d_x.row(i);
    for (std::size_t j = 0; j < y.cols(); ++j) orow[j] = yrow[j] * (drow[j] - dot);
  }
  return d_x;
}

}  // namespace cqs

#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace cqs {

// Dense row-major matrix of doubles. The numeric workhorse for feature maps,
// attention weights and every intermediate tensor.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  double* row(std::size_t r) noexcept { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const noexcept { return data_.data() + r * cols_; }

  bool all_finite() const noexcept;
  std::string shape_str() const;  // e.g. "3x5"

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);      // a * b
Matrix matmul_abt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix matmul_atb(const Matrix& a, const Matrix& b);  // a^T * b
Matrix transposed(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
void add_in_place(Matrix& a, const Matrix& b);
void scale_in_place(Matrix& a, double s);
std::vector<double> column_sums(const Matrix& a);

// out[i][j] = sum_k x[i][k] * w[k][j] + b[j]
Matrix linear(const Matrix& x, const Matrix& w, const std::vector<double>& b);

struct LinearGrads {
  Matrix d_x;
  Matrix d_w;
  std::vector<double> d_b;
};
LinearGrads linear_backward(const Matrix& x, const Matrix& w, const Matrix& d_out);

// Row-wise softmax, stabilized by row-max subtraction. Rows sum to 1.
Matrix softmax_rows(const Matrix& x);
// d_x given y = softmax_rows(x) and upstream d_y.
Matrix softmax_rows_backward(const Matrix& y, const Matrix& d_y);

}  // namespace cqs

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "bamboo/error.hpp"

namespace bamboo {

// Dense row-major matrix. Vectors are 1×n matrices.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data);
  Matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values)
      : Matrix(rows, cols, std::vector<T>(values)) {}

  static Matrix identity(std::size_t n);
  static Matrix row_vector(std::span<const T> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_string() const;

  void fill(T value);
  bool all_finite() const;
  Matrix transposed() const;

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

// Throws NonFiniteError naming `where` if any entry is NaN or Inf.
template <typename T>
void require_finite(const Matrix<T>& m, const char* where);

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* where);

// Kernels. Every output element is reduced left to right over the inner
// index, so results are bit-reproducible and equal to a naive triple loop.

// c += a·b with a [m×k], b [k×n], c [m×n].
template <typename T>
void gemm_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c);

// c += aᵀ·b with a [k×m], b [k×n], c [m×n].
template <typename T>
void gemm_tn_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c);

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);

// a·bᵀ with a [m×k], b [n×k].
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b);

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& a);

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& a, const Matrix<T>& gain, const Matrix<T>& bias, T eps);

enum class Activation { relu, gelu };

Activation parse_activation(const std::string& name);
std::string to_string(Activation kind);

template <typename T>
T gelu(T x);

template <typename T>
Matrix<T> activate(const Matrix<T>& a, Activation kind);

}  // namespace bamboo

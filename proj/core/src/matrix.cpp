#include "bamboo/matrix.hpp"

#include <cstring>
#include <type_traits>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace bamboo {

template <typename T>
Matrix<T>::Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

template <typename T>
Matrix<T> Matrix<T>::identity(std::size_t n) {
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = T{1};
  return out;
}

template <typename T>
Matrix<T> Matrix<T>::row_vector(std::span<const T> values) {
  return Matrix(1, values.size(), std::vector<T>(values.begin(), values.end()));
}

template <typename T>
std::string Matrix<T>::shape_string() const {
  std::ostringstream os;
  os << '[' << rows_ << 'x' << cols_ << ']';
  return os.str();
}

template <typename T>
void Matrix<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Matrix<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Matrix<T> Matrix<T>::transposed() const {
  Matrix out(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
  }
  return out;
}

template <typename T>
void require_finite(const Matrix<T>& m, const char* where) {
  if (!m.all_finite()) {
    throw NonFiniteError(std::string("non-finite value in ") + where + " " + m.shape_string());
  }
}

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* where) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

namespace {

// c[i][j] += sum_kk a(i,kk) * b[kk][j], with a(i,kk) = pa[i*si + kk*sk].
// Register tiles of MR rows by NV vectors; each element still sums over kk
// in ascending order with a separate multiply and add, so results match the
// plain triple loop bit for bit.
template <typename T, std::size_t MR, std::size_t NV>
inline void gemm_tile(const T* pa, std::size_t si, std::size_t sk, const T* pb, T* pc,
                      std::size_t k, std::size_t n, std::size_t i, std::size_t j) {
  typedef T V __attribute__((vector_size(64)));
  constexpr std::size_t W = sizeof(V) / sizeof(T);
  V acc[MR][NV];
  for (std::size_t r = 0; r < MR; ++r) {
    for (std::size_t v = 0; v < NV; ++v) {
      std::memcpy(&acc[r][v], pc + (i + r) * n + j + v * W, sizeof(V));
    }
  }
  for (std::size_t kk = 0; kk < k; ++kk) {
    V b[NV];
    for (std::size_t v = 0; v < NV; ++v) std::memcpy(&b[v], pb + kk * n + j + v * W, sizeof(V));
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = pa[(i + r) * si + kk * sk];
      for (std::size_t v = 0; v < NV; ++v) acc[r][v] += av * b[v];
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    for (std::size_t v = 0; v < NV; ++v) {
      std::memcpy(pc + (i + r) * n + j + v * W, &acc[r][v], sizeof(V));
    }
  }
}

template <typename T, std::size_t MR>
void gemm_rows(const T* pa, std::size_t si, std::size_t sk, const T* pb, T* pc, std::size_t k,
               std::size_t n, std::size_t i) {
  std::size_t j = 0;
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    constexpr std::size_t W = 64 / sizeof(T);
    for (; j + 2 * W <= n; j += 2 * W) gemm_tile<T, MR, 2>(pa, si, sk, pb, pc, k, n, i, j);
    for (; j + W <= n; j += W) gemm_tile<T, MR, 1>(pa, si, sk, pb, pc, k, n, i, j);
  }
  if (j == n) return;
  for (std::size_t r = 0; r < MR; ++r) {
    T* crow = pc + (i + r) * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = pa[(i + r) * si + kk * sk];
      const T* brow = pb + kk * n;
      for (std::size_t c = j; c < n; ++c) crow[c] += av * brow[c];
    }
  }
}

template <typename T>
void gemm_strided(const T* pa, std::size_t si, std::size_t sk, const T* pb, T* pc, std::size_t m,
                  std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<T, 4>(pa, si, sk, pb, pc, k, n, i);
  for (; i < m; ++i) gemm_rows<T, 1>(pa, si, sk, pb, pc, k, n, i);
}

}  // namespace

template <typename T>
void gemm_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k || c.rows() != m || c.cols() != n) {
    throw ShapeError("matmul: inner dimensions disagree " + a.shape_string() + " x " +
                     b.shape_string() + " -> " + c.shape_string());
  }
  gemm_strided(a.data().data(), k, 1, b.data().data(), c.data().data(), m, k, n);
}

template <typename T>
void gemm_tn_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k || c.rows() != m || c.cols() != n) {
    throw ShapeError("matmul_tn: dimensions disagree " + a.shape_string() + "ᵀ x " +
                     b.shape_string() + " -> " + c.shape_string());
  }
  gemm_strided(a.data().data(), 1, m, b.data().data(), c.data().data(), m, k, n);
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> c(a.rows(), b.cols());
  gemm_accumulate(a, b, c);
  return c;
}

template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.shape_string() + " x " + b.shape_string() + "ᵀ");
  }
  return matmul(a, b.transposed());
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& a) {
  require_finite(a, "softmax_rows");
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto in = a.row(r);
    auto o = out.row(r);
    const T peak = *std::max_element(in.begin(), in.end());
    T total{0};
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - peak);
      total += o[c];
    }
    for (auto& v : o) v /= total;
  }
  return out;
}

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& a, const Matrix<T>& gain, const Matrix<T>& bias, T eps) {
  const std::size_t d = a.cols();
  if (d == 0 || gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  Matrix<T> out(a.rows(), d);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto in = a.row(r);
    T mean{0};
    for (T v : in) mean += v;
    mean /= static_cast<T>(d);
    T var{0};
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(var + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) o[c] = (in[c] - mean) * inv * gain[c] + bias[c];
  }
  require_finite(out, "layer_norm");
  return out;
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + name + "' (expected relu or gelu)");
}

std::string to_string(Activation kind) { return kind == Activation::relu ? "relu" : "gelu"; }

template <typename T>
T gelu(T x) {
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  return T{0.5} * x * (T{1} + std::tanh(k * (x + T{0.044715} * x * x * x)));
}

template <typename T>
Matrix<T> activate(const Matrix<T>& a, Activation kind) {
  Matrix<T> out(a.rows(), a.cols());
  auto in = a.data();
  auto o = out.data();
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > T{0} ? in[i] : T{0};
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = gelu(in[i]);
  }
  return out;
}

#define BAMBOO_INSTANTIATE(T)                                                         \
  template class Matrix<T>;                                                           \
  template void require_finite(const Matrix<T>&, const char*);                        \
  template void require_same_shape(const Matrix<T>&, const Matrix<T>&, const char*);  \
  template void gemm_accumulate(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);      \
  template void gemm_tn_accumulate(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);   \
  template Matrix<T> matmul(const Matrix<T>&, const Matrix<T>&);                      \
  template Matrix<T> matmul_nt(const Matrix<T>&, const Matrix<T>&);                   \
  template Matrix<T> softmax_rows(const Matrix<T>&);                                  \
  template Matrix<T> layer_norm(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, \
                                T);                                                   \
  template T gelu(T);                                                                 \
  template Matrix<T> activate(const Matrix<T>&, Activation);

BAMBOO_INSTANTIATE(float)
BAMBOO_INSTANTIATE(double)
BAMBOO_INSTANTIATE(long double)

#undef BAMBOO_INSTANTIATE

}  // namespace bamboo

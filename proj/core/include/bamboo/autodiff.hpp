#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "bamboo/matrix.hpp"

namespace bamboo {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Matrix<T>& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Append-only computation graph. Nodes are recorded in creation order, which
// is a topological order, so backward() is a single reverse sweep.
template <typename T>
class Tape {
 public:
  using value_type = T;

  // Receives the tape and the id of the node whose gradient is ready and
  // accumulates into the parents' gradients.
  using BackwardRule = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    std::vector<std::size_t> parents;
    BackwardRule backward;
    bool requires_grad = false;
  };

  Var<T> leaf(Matrix<T> value, bool requires_grad = true);
  Var<T> constant(Matrix<T> value) { return leaf(std::move(value), false); }

  // Records an op output. The value is checked for NaN/Inf.
  Var<T> record(Matrix<T> value, std::vector<std::size_t> parents, BackwardRule rule,
                const char* op);

  const Matrix<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  const Matrix<T>& value(std::size_t id) const { return nodes_[id].value; }

  // Gradient of the last backward() root w.r.t. v (zeros if no path).
  Matrix<T> grad(Var<T> v) const;
  const Matrix<T>& upstream(std::size_t id) const { return nodes_[id].grad; }

  // Zero-initialized gradient buffer of a parent; null when the parent does
  // not require gradients.
  Matrix<T>* accumulator(std::size_t id);

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Seeds d(root)/d(root) = 1 for a 1×1 root and sweeps in reverse.
  void backward(Var<T> root);

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

template <typename T>
const Matrix<T>& Var<T>::value() const {
  return tape->value(id);
}

// Differentiable ops. All operands must live on the same tape.
namespace ad {

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

// a [m×n] + bias [1×n] broadcast over rows.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> bias);

template <typename T>
Var<T> scale(Var<T> a, T factor);

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

// a·bᵀ
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b);

template <typename T>
Var<T> softmax_rows(Var<T> a);

template <typename T>
Var<T> layer_norm(Var<T> a, Var<T> gain, Var<T> bias, T eps);

template <typename T>
Var<T> activate(Var<T> a, Activation kind);

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t count);

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts);

// Stacks `top` [1×n] above `a` [m×n].
template <typename T>
Var<T> prepend_row(Var<T> top, Var<T> a);

template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const std::size_t> rows);

// Rows listed in `rows` are replaced by `token` [1×n].
template <typename T>
Var<T> replace_rows(Var<T> a, Var<T> token, std::span<const std::size_t> rows);

// Mean of the listed rows, [1×n].
template <typename T>
Var<T> mean_rows(Var<T> a, std::span<const std::size_t> rows);

// Mean squared error against a constant target, averaged over all entries.
template <typename T>
Var<T> mse(Var<T> pred, const Matrix<T>& target);

// Softmax cross-entropy of a [1×C] logit row against a class index.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::size_t label);

// Sum of all entries, [1×1].
template <typename T>
Var<T> sum(Var<T> a);

}  // namespace ad

}  // namespace bamboo

#include "bamboo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace bamboo {

template <typename T>
Var<T> Tape<T>::leaf(Matrix<T> value, bool requires_grad) {
  require_finite(value, "leaf");
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Matrix<T> value, std::vector<std::size_t> parents, BackwardRule rule,
                       const char* op) {
  require_finite(value, op);
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                   [this](std::size_t p) { return nodes_[p].requires_grad; });
  node.parents = std::move(parents);
  if (node.requires_grad) node.backward = std::move(rule);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Matrix<T> Tape<T>::grad(Var<T> v) const {
  const Node& node = nodes_[v.id];
  if (node.grad.empty()) return Matrix<T>(node.value.rows(), node.value.cols());
  return node.grad;
}

template <typename T>
Matrix<T>* Tape<T>::accumulator(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.requires_grad) return nullptr;
  if (node.grad.empty() && !node.value.empty()) {
    node.grad = Matrix<T>(node.value.rows(), node.value.cols());
  }
  return &node.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
  if (root.tape != this) throw Error("backward: root belongs to another tape");
  if (nodes_[root.id].value.size() != 1) {
    throw ShapeError("backward: root must be 1x1, got " + nodes_[root.id].value.shape_string());
  }
  for (auto& node : nodes_) node.grad = Matrix<T>();
  if (!nodes_[root.id].requires_grad) return;
  nodes_[root.id].grad = Matrix<T>(1, 1, T{1});
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.grad.empty() || !node.backward) continue;
    node.backward(*this, i);
  }
}

namespace ad {
namespace {

template <typename T>
void same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw Error(std::string(op) + ": operands live on different tapes");
  }
}

template <typename T>
void add_into(Matrix<T>& dst, const Matrix<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T>
void check_rows(std::span<const std::size_t> rows, std::size_t limit, const char* op) {
  for (auto r : rows) {
    if (r >= limit) {
      throw ShapeError(std::string(op) + ": row " + std::to_string(r) + " out of range " +
                       std::to_string(limit));
    }
  }
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Matrix<T> out = a.value();
  add_into(out, b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {ia, ib},
      [ia, ib](Tape<T>& t, std::size_t self) {
        const auto& g = t.upstream(self);
        if (auto* da = t.accumulator(ia)) add_into(*da, g);
        if (auto* db = t.accumulator(ib)) add_into(*db, g);
      },
      "add");
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> bias) {
  same_tape(a, bias, "add_row");
  const auto& x = a.value();
  const auto& b = bias.value();
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw ShapeError("add_row: bias " + b.shape_string() + " vs " + x.shape_string());
  }
  Matrix<T> out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  const std::size_t ia = a.id, ib = bias.id;
  return a.tape->record(
      std::move(out), {ia, ib},
      [ia, ib](Tape<T>& t, std::size_t self) {
        const auto& g = t.upstream(self);
        if (auto* da = t.accumulator(ia)) add_into(*da, g);
        if (auto* db = t.accumulator(ib)) {
          for (std::size_t r = 0; r < g.rows(); ++r) {
            auto row = g.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) (*db)[c] += row[c];
          }
        }
      },
      "add_row");
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Matrix<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out), {ia},
      [ia, factor](Tape<T>& t, std::size_t self) {
        if (auto* da = t.accumulator(ia)) {
          auto g = t.upstream(self).data();
          auto d = da->data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * factor;
        }
      },
      "scale");
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  same_tape(a, b, "matmul");
  Matrix<T> out = bamboo::matmul(a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {ia, ib},
      [ia, ib](Tape<T>& t, std::size_t self) {
        const auto& g = t.upstream(self);
        if (auto* da = t.accumulator(ia)) gemm_accumulate(g, t.value(ib).transposed(), *da);
        if (auto* db = t.accumulator(ib)) gemm_tn_accumulate(t.value(ia), g, *db);
      },
      "matmul");
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  same_tape(a, b, "matmul_nt");
  Matrix<T> out = bamboo::matmul_nt(a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {ia, ib},
      [ia, ib](Tape<T>& t, std::size_t self) {
        const auto& g = t.upstream(self);
        if (auto* da = t.accumulator(ia)) gemm_accumulate(g, t.value(ib), *da);
        if (auto* db = t.accumulator(ib)) gemm_tn_accumulate(g, t.value(ia), *db);
      },
      "matmul_nt");
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  Matrix<T> out = bamboo::softmax_rows(a.value());
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out), {ia},
      [ia](Tape<T>& t, std::size_t self) {
        auto* da = t.accumulator(ia);
        if (!da) return;
        const auto& y = t.value(self);
        const auto& g = t.upstream(self);
        for (std::size_t r = 0; r < y.rows(); ++r) {
          auto yr = y.row(r);
          auto gr = g.row(r);
          T dot{0};
          for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
          auto dr = da->row(r);
          for (std::size_t c = 0; c < yr.size(); ++c) dr[c] += yr[c] * (gr[c] - dot);
        }
      },
      "softmax_rows");
}

template <typename T>
Var<T> layer_norm(Var<T> a, Var<T> gain, Var<T> bias, T eps) {
  same_tape(a, gain, "layer_norm");
  same_tape(a, bias, "layer_norm");
  const auto& x = a.value();
  const std::size_t rows = x.rows(), d = x.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  // normalized activations and per-row inverse std are kept for backward
  Matrix<T> xhat(rows, d);
  std::vector<T> inv_std(rows);
  Matrix<T> out(rows, d);
  const auto& g = gain.value();
  const auto& b = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = x.row(r);
    T mean{0};
    for (T v : in) mean += v;
    mean /= static_cast<T>(d);
    T var{0};
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    auto xr = xhat.row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      xr[c] = (in[c] - mean) * inv_std[r];
      o[c] = xr[c] * g[c] + b[c];
    }
  }
  const std::size_t ia = a.id, ig = gain.id, ib = bias.id;
  return a.tape->record(
      std::move(out), {ia, ig, ib},
      [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t,
                                                                         std::size_t self) {
        const auto& up = t.upstream(self);
        const auto& gv = t.value(ig);
        const std::size_t d = xhat.cols();
        if (auto* dg = t.accumulator(ig)) {
          for (std::size_t r = 0; r < up.rows(); ++r) {
            for (std::size_t c = 0; c < d; ++c) (*dg)[c] += up(r, c) * xhat(r, c);
          }
        }
        if (auto* db = t.accumulator(ib)) {
          for (std::size_t r = 0; r < up.rows(); ++r) {
            for (std::size_t c = 0; c < d; ++c) (*db)[c] += up(r, c);
          }
        }
        if (auto* da = t.accumulator(ia)) {
          std::vector<T> dxhat(d);
          for (std::size_t r = 0; r < up.rows(); ++r) {
            T sum_dx{0}, sum_dx_xhat{0};
            for (std::size_t c = 0; c < d; ++c) {
              dxhat[c] = up(r, c) * gv[c];
              sum_dx += dxhat[c];
              sum_dx_xhat += dxhat[c] * xhat(r, c);
            }
            const T n = static_cast<T>(d);
            for (std::size_t c = 0; c < d; ++c) {
              (*da)(r, c) += inv_std[r] / n * (n * dxhat[c] - sum_dx - xhat(r, c) * sum_dx_xhat);
            }
          }
        }
      },
      "layer_norm");
}

template <typename T>
Var<T> activate(Var<T> a, Activation kind) {
  Matrix<T> out = bamboo::activate(a.value(), kind);
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out), {ia},
      [ia, kind](Tape<T>& t, std::size_t self) {
        auto* da = t.accumulator(ia);
        if (!da) return;
        auto x = t.value(ia).data();
        auto g = t.upstream(self).data();
        auto d = da->data();
        if (kind == Activation::relu) {
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += x[i] > T{0} ? g[i] : T{0};
        } else {
          const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
          const T c = static_cast<T>(0.044715);
          for (std::size_t i = 0; i < d.size(); ++i) {
            const T xi = x[i];
            const T th = std::tanh(k * (xi + c * xi * xi * xi));
            const T dydx = T{0.5} * (T{1} + th) +
                           T{0.5} * xi * (T{1} - th * th) * k * (T{1} + T{3} * c * xi * xi);
            d[i] += g[i] * dydx;
          }
        }
      },
      kind == Activation::relu ? "relu" : "gelu");
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t count) {
  const auto& x = a.value();
  if (begin + count > x.cols()) throw ShapeError("slice_cols: range exceeds " + x.shape_string());
  Matrix<T> out(x.rows(), count);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = x.row(r).subspan(begin, count);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out), {ia},
      [ia, begin, count](Tape<T>& t, std::size_t self) {
        auto* da = t.accumulator(ia);
        if (!da) return;
        const auto& g = t.upstream(self);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto dst = da->row(r).subspan(begin, count);
          auto src = g.row(r);
          for (std::size_t c = 0; c < count; ++c) dst[c] += src[c];
        }
      },
      "slice_cols");
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    same_tape(parts[0], p, "concat_cols");
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    ids.push_back(p.id);
    offsets.push_back(cols);
    cols += p.cols();
  }
  Matrix<T> out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& v = parts[i].value();
    for (std::size_t r = 0; r < rows; ++r) {
      auto src = v.row(r);
      std::copy(src.begin(), src.end(), out.row(r).begin() + offsets[i]);
    }
  }
  auto parents = ids;
  return parts[0].tape->record(
      std::move(out), std::move(parents),
      [ids, offsets](Tape<T>& t, std::size_t self) {
        const auto& g = t.upstream(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          auto* di = t.accumulator(ids[i]);
          if (!di) continue;
          const std::size_t w = di->cols();
          for (std::size_t r = 0; r < g.rows(); ++r) {
            auto src = g.row(r).subspan(offsets[i], w);
            auto dst = di->row(r);
            for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
          }
        }
      },
      "concat_cols");
}

template <typename T>
Var<T> prepend_row(Var<T> top, Var<T> a) {
  same_tape(top, a, "prepend_row");
  const auto& x = a.value();
  const auto& v = top.value();
  if (v.rows() != 1 || v.cols() != x.cols()) {
    throw ShapeError("prepend_row: " + v.shape_string() + " onto " + x.shape_string());
  }
  Matrix<T> out(x.rows() + 1, x.cols());
  std::copy(v.data().begin(), v.data().end(), out.row(0).begin());
  std::copy(x.data().begin(), x.data().end(), out.data().begin() + x.cols());
  const std::size_t itop = top.id, ia = a.id;
  return a.tape->record(
      std::move(out), {itop, ia},
      [itop, ia](Tape<T>& t, std::size_t self) {
        const auto& g = t.upstream(self);
        if (auto* dt = t.accumulator(itop)) {
          auto src = g.row(0);
          for (std::size_t c = 0; c < src.size(); ++c) (*dt)[c] += src[c];
        }
        if (auto* da = t.accumulator(ia)) {
          auto d = da->data();
          auto src = g.data().subspan(g.cols());
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
        }
      },
      "prepend_row");
}

template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const std::size_t> rows) {
  const auto& x = a.value();
  check_rows<T>(rows, x.rows(), "gather_rows");
  Matrix<T> out(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = x.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const std::size_t ia = a.id;
  std::vector<std::size_t> picked(rows.begin(), rows.end());
  return a.tape->record(
      std::move(out), {ia},
      [ia, picked = std::move(picked)](Tape<T>& t, std::size_t self) {
        auto* da = t.accumulator(ia);
        if (!da) return;
        const auto& g = t.upstream(self);
        for (std::size_t i = 0; i < picked.size(); ++i) {
          auto src = g.row(i);
          auto dst = da->row(picked[i]);
          for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
      },
      "gather_rows");
}

template <typename T>
Var<T> replace_rows(Var<T> a, Var<T> token, std::span<const std::size_t> rows) {
  same_tape(a, token, "replace_rows");
  const auto& x = a.value();
  const auto& tok = token.value();
  if (tok.rows() != 1 || tok.cols() != x.cols()) {
    throw ShapeError("replace_rows: token " + tok.shape_string() + " vs " + x.shape_string());
  }
  check_rows<T>(rows, x.rows(), "replace_rows");
  std::vector<char> replaced(x.rows(), 0);
  for (auto r : rows) replaced[r] = 1;
  Matrix<T> out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (replaced[r]) std::copy(tok.data().begin(), tok.data().end(), out.row(r).begin());
  }
  const std::size_t ia = a.id, itok = token.id;
  return a.tape->record(
      std::move(out), {ia, itok},
      [ia, itok, replaced = std::move(replaced)](Tape<T>& t, std::size_t self) {
        const auto& g = t.upstream(self);
        auto* da = t.accumulator(ia);
        auto* dt = t.accumulator(itok);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto src = g.row(r);
          if (replaced[r]) {
            if (dt) {
              for (std::size_t c = 0; c < src.size(); ++c) (*dt)[c] += src[c];
            }
          } else if (da) {
            auto dst = da->row(r);
            for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
          }
        }
      },
      "replace_rows");
}

template <typename T>
Var<T> mean_rows(Var<T> a, std::span<const std::size_t> rows) {
  const auto& x = a.value();
  if (rows.empty()) throw DomainError("mean_rows: no rows selected");
  check_rows<T>(rows, x.rows(), "mean_rows");
  Matrix<T> out(1, x.cols());
  for (auto r : rows) {
    auto src = x.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) out[c] += src[c];
  }
  const T inv = T{1} / static_cast<T>(rows.size());
  for (auto& v : out.data()) v *= inv;
  const std::size_t ia = a.id;
  std::vector<std::size_t> picked(rows.begin(), rows.end());
  return a.tape->record(
      std::move(out), {ia},
      [ia, inv, picked = std::move(picked)](Tape<T>& t, std::size_t self) {
        auto* da = t.accumulator(ia);
        if (!da) return;
        auto g = t.upstream(self).data();
        for (auto r : picked) {
          auto dst = da->row(r);
          for (std::size_t c = 0; c < g.size(); ++c) dst[c] += g[c] * inv;
        }
      },
      "mean_rows");
}

template <typename T>
Var<T> mse(Var<T> pred, const Matrix<T>& target) {
  require_same_shape(pred.value(), target, "mse");
  if (target.empty()) throw DomainError("mse: empty operands");
  auto p = pred.value().data();
  auto y = target.data();
  T total{0};
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - y[i]) * (p[i] - y[i]);
  const T n = static_cast<T>(p.size());
  Matrix<T> out(1, 1, total / n);
  const std::size_t ip = pred.id;
  return pred.tape->record(
      std::move(out), {ip},
      [ip, target, n](Tape<T>& t, std::size_t self) {
        auto* dp = t.accumulator(ip);
        if (!dp) return;
        const T g = t.upstream(self)[0];
        auto p = t.value(ip).data();
        auto y = target.data();
        auto d = dp->data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * T{2} * (p[i] - y[i]) / n;
      },
      "mse");
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::size_t label) {
  const auto& z = logits.value();
  if (z.rows() != 1) throw ShapeError("cross_entropy: logits must be a single row");
  if (label >= z.cols()) {
    throw DomainError("cross_entropy: label " + std::to_string(label) + " outside [0," +
                      std::to_string(z.cols()) + ")");
  }
  Matrix<T> probs = bamboo::softmax_rows(z);
  const T peak = *std::max_element(z.data().begin(), z.data().end());
  T total{0};
  for (T v : z.data()) total += std::exp(v - peak);
  // log-sum-exp form stays finite when probs[label] underflows
  Matrix<T> out(1, 1, std::log(total) + peak - z[label]);
  const std::size_t iz = logits.id;
  return logits.tape->record(
      std::move(out), {iz},
      [iz, label, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
        auto* dz = t.accumulator(iz);
        if (!dz) return;
        const T g = t.upstream(self)[0];
        for (std::size_t c = 0; c < probs.cols(); ++c) {
          (*dz)[c] += g * (probs[c] - (c == label ? T{1} : T{0}));
        }
      },
      "cross_entropy");
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total{0};
  for (T v : a.value().data()) total += v;
  const std::size_t ia = a.id;
  return a.tape->record(
      Matrix<T>(1, 1, total), {ia},
      [ia](Tape<T>& t, std::size_t self) {
        auto* da = t.accumulator(ia);
        if (!da) return;
        const T g = t.upstream(self)[0];
        for (auto& v : da->data()) v += g;
      },
      "sum");
}

#define BAMBOO_INSTANTIATE(T)                                                             \
  template Var<T> add(Var<T>, Var<T>);                                                    \
  template Var<T> add_row(Var<T>, Var<T>);                                                \
  template Var<T> scale(Var<T>, T);                                                       \
  template Var<T> matmul(Var<T>, Var<T>);                                                 \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                              \
  template Var<T> softmax_rows(Var<T>);                                                   \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                  \
  template Var<T> activate(Var<T>, Activation);                                           \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                           \
  template Var<T> concat_cols(std::span<const Var<T>>);                                   \
  template Var<T> prepend_row(Var<T>, Var<T>);                                            \
  template Var<T> gather_rows(Var<T>, std::span<const std::size_t>);                      \
  template Var<T> replace_rows(Var<T>, Var<T>, std::span<const std::size_t>);             \
  template Var<T> mean_rows(Var<T>, std::span<const std::size_t>);                        \
  template Var<T> mse(Var<T>, const Matrix<T>&);                                          \
  template Var<T> cross_entropy(Var<T>, std::size_t);                                    \
  template Var<T> sum(Var<T>);

BAMBOO_INSTANTIATE(float)
BAMBOO_INSTANTIATE(double)
BAMBOO_INSTANTIATE(long double)

#undef BAMBOO_INSTANTIATE

}  // namespace ad

template class Tape<float>;
template class Tape<double>;
template class Tape<long double>;
template struct Var<float>;
template struct Var<double>;
template struct Var<long double>;

}  // namespace bamboo

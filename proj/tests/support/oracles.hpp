// Brute-force reference implementations and random generators shared by the
// unit and acceptance tests. Deliberately naive: no shared code with core.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "bamboo/matrix.hpp"

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows to_rows(const bamboo::Matrix<double>& m) {
  Rows out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  }
  return out;
}

inline bamboo::Matrix<double> from_rows(const Rows& rows) {
  bamboo::Matrix<double> m(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
  }
  return m;
}

inline bamboo::Matrix<double> triple_loop(const bamboo::Matrix<double>& a,
                                          const bamboo::Matrix<double>& b) {
  bamboo::Matrix<double> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  }
  return c;
}

// Two passes per dimension: mean with 1/n, then sample std with 1/(n-1).
inline double mean_token_std(const Rows& h) {
  const std::size_t n = h.size(), d = h[0].size();
  double total = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t t = 0; t < n; ++t) mean += h[t][j];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t t = 0; t < n; ++t) ss += (h[t][j] - mean) * (h[t][j] - mean);
    total += std::sqrt(ss / static_cast<double>(n - 1));
  }
  return total / static_cast<double>(d);
}

inline Rows centered(const Rows& h) {
  const std::size_t n = h.size(), d = h[0].size();
  Rows out = h;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t t = 0; t < n; ++t) mean += h[t][j];
    mean /= static_cast<double>(n);
    for (std::size_t t = 0; t < n; ++t) out[t][j] -= mean;
  }
  return out;
}

// Every unordered pair, cosine computed from scratch each time.
inline double centered_pair_cosine(const Rows& h, double eps = 1e-12) {
  const Rows c = centered(h);
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < c.size(); ++a) {
    for (std::size_t b = a + 1; b < c.size(); ++b) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t j = 0; j < c[a].size(); ++j) {
        dot += c[a][j] * c[b][j];
        na += c[a][j] * c[a][j];
        nb += c[b][j] * c[b][j];
      }
      na = std::sqrt(na);
      nb = std::sqrt(nb);
      if (na < eps && nb < eps) {
        total += 1.0;
      } else if (na >= eps && nb >= eps) {
        total += dot / (na * nb);
      }
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

inline double layer_variance(const Rows& h) {
  const Rows c = centered(h);
  double ss = 0.0;
  std::size_t count = 0;
  for (const auto& row : c) {
    for (double v : row) {
      ss += v * v;
      ++count;
    }
  }
  return ss / static_cast<double>(count);
}

// Random trace layer with a random shape in the given ranges. Columns get
// different offsets and scales so centering matters.
inline Rows random_layer(std::mt19937_64& gen, std::size_t t_lo, std::size_t t_hi,
                         std::size_t d_lo, std::size_t d_hi) {
  std::uniform_int_distribution<std::size_t> tdist(t_lo, t_hi), ddist(d_lo, d_hi);
  const std::size_t t = tdist(gen), d = ddist(gen);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> offset(-5.0, 5.0), scale(0.1, 3.0);
  std::vector<double> off(d), sc(d);
  for (std::size_t j = 0; j < d; ++j) {
    off[j] = offset(gen);
    sc[j] = scale(gen);
  }
  Rows h(t, std::vector<double>(d));
  for (auto& row : h) {
    for (std::size_t j = 0; j < d; ++j) row[j] = off[j] + sc[j] * z(gen);
  }
  return h;
}

inline bamboo::Matrix<double> random_matrix(std::mt19937_64& gen, std::size_t rows,
                                            std::size_t cols, double scale = 1.0) {
  std::normal_distribution<double> z(0.0, scale);
  bamboo::Matrix<double> m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = z(gen);
  return m;
}

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace oracle

#include "bamboo/random.hpp"

#include <cmath>

namespace bamboo {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined word
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename T>
Matrix<T> xavier_uniform(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
  if (in_dim == 0 || out_dim == 0) throw ConfigError("xavier_uniform: dimensions must be >= 1");
  const double bound = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
  Matrix<T> out(in_dim, out_dim);
  for (auto& v : out.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

template <typename T>
Matrix<T> linear_init(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed) {
  Rng rng(seed);
  return xavier_uniform<T>(in_dim, out_dim, rng);
}

template <typename T>
Matrix<T> gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix<T> out(rows, cols);
  for (auto& v : out.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return out;
}

template Matrix<float> xavier_uniform<float>(std::size_t, std::size_t, Rng&);
template Matrix<double> xavier_uniform<double>(std::size_t, std::size_t, Rng&);
template Matrix<float> linear_init<float>(std::size_t, std::size_t, std::uint64_t);
template Matrix<double> linear_init<double>(std::size_t, std::size_t, std::uint64_t);
template Matrix<float> gaussian<float>(std::size_t, std::size_t, double, Rng&);
template Matrix<double> gaussian<double>(std::size_t, std::size_t, double, Rng&);
template Matrix<long double> xavier_uniform<long double>(std::size_t, std::size_t, Rng&);
template Matrix<long double> gaussian<long double>(std::size_t, std::size_t, double, Rng&);

}  // namespace bamboo

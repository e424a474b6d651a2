#pragma once

#include <cstdint>
#include <random>

#include "bamboo/matrix.hpp"

namespace bamboo {

// Mixes a base seed with a stream id so that independent consumers
// (initialization, masking, shuffling, data) never share a sequence.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Uniform integer in [lo, hi].
  std::uint64_t integer(std::uint64_t lo, std::uint64_t hi) {
    return std::uniform_int_distribution<std::uint64_t>(lo, hi)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Xavier-uniform weights [in_dim × out_dim], entries in ±sqrt(6/(in+out)).
template <typename T>
Matrix<T> xavier_uniform(std::size_t in_dim, std::size_t out_dim, Rng& rng);

template <typename T>
Matrix<T> linear_init(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed);

template <typename T>
Matrix<T> gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng);

}  // namespace bamboo

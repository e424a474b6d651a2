#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "bamboo/matrix.hpp"

namespace bamboo {

// Sequences of locally correlated tokens carrying one global label:
//   x_t[j] = prototype_c[j] + sum_k a_k[j] sin(2 pi f_k t / T + phi_k[j]) + noise
// with integer frequencies f_k in [1, max_freq], so the oscillations cancel
// exactly in the token mean and the label is recoverable from it.
struct SyntheticSpec {
  std::size_t seq_len = 32;     // T
  std::size_t patch_dim = 16;   // p
  std::size_t num_classes = 4;  // C, at most p (prototypes are orthonormal)
  std::size_t components = 4;   // K
  std::size_t max_freq = 3;     // cycles per sequence
  double amplitude = 1.0;       // a_k[j] ~ U(-amplitude, amplitude)
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

struct Sample {
  Matrix<double> tokens;  // [T×p]
  std::size_t label = 0;
};

struct Dataset {
  SyntheticSpec spec;
  Matrix<double> prototypes;  // [C×p], orthonormal rows
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

// Orthonormal class prototypes fixed by the spec seed.
Matrix<double> class_prototypes(const SyntheticSpec& spec);

Dataset generate(const SyntheticSpec& spec, std::size_t n);

// argmax_c <mean token, prototype_c>, ties to the lowest class.
std::size_t oracle_label(const Matrix<double>& tokens, const Matrix<double>& prototypes);

// First 80% / last 20% of the generated stream.
std::pair<Dataset, Dataset> train_test_split(const Dataset& data);

// Header u32 (T, p, C, n), then per sequence T·p f32 tokens and a u32 label.
void dump_dataset(const std::filesystem::path& path, const Dataset& data);
// Reads a dump. Only the shape fields of the spec and the samples are restored.
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace bamboo

#include "bamboo/synth.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "bamboo/random.hpp"

namespace bamboo {
namespace {

constexpr std::uint64_t kPrototypeStream = 1;
constexpr std::uint64_t kSequenceStream = 2;

}  // namespace

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid synthetic spec: " + msg); };
  if (seq_len < 4) fail("seq_len must be >= 4");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (patch_dim < num_classes) fail("patch_dim must be >= num_classes for orthogonal prototypes");
  if (max_freq < 1) fail("max_freq must be >= 1");
  if (2 * max_freq >= seq_len) fail("max_freq must be < seq_len / 2");
  if (!(amplitude >= 0.0)) fail("amplitude must be non-negative");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be non-negative");
}

Matrix<double> class_prototypes(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, kPrototypeStream));
  const std::size_t c_count = spec.num_classes, p = spec.patch_dim;
  Matrix<double> protos(c_count, p);
  for (std::size_t c = 0; c < c_count; ++c) {
    // Gram-Schmidt; resample on the (measure-zero) chance of a degenerate draw
    for (;;) {
      auto row = protos.row(c);
      for (auto& v : row) v = rng.normal(0.0, 1.0);
      for (std::size_t prev = 0; prev < c; ++prev) {
        auto q = protos.row(prev);
        double dot = 0.0;
        for (std::size_t j = 0; j < p; ++j) dot += row[j] * q[j];
        for (std::size_t j = 0; j < p; ++j) row[j] -= dot * q[j];
      }
      double norm = 0.0;
      for (double v : row) norm += v * v;
      norm = std::sqrt(norm);
      if (norm < 1e-8) continue;
      for (auto& v : row) v /= norm;
      break;
    }
  }
  return protos;
}

Dataset generate(const SyntheticSpec& spec, std::size_t n) {
  spec.validate();
  if (n < 1) throw DomainError("generate: n must be >= 1");
  Dataset data;
  data.spec = spec;
  data.prototypes = class_prototypes(spec);
  data.samples.reserve(n);

  Rng rng(derive_seed(spec.seed, kSequenceStream));
  const std::size_t T = spec.seq_len, p = spec.patch_dim, K = spec.components;
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<std::size_t> freq(K);
  Matrix<double> amp(K, p), phase(K, p);
  for (std::size_t s = 0; s < n; ++s) {
    const auto label = static_cast<std::size_t>(rng.integer(0, spec.num_classes - 1));
    for (std::size_t k = 0; k < K; ++k) {
      freq[k] = static_cast<std::size_t>(rng.integer(1, spec.max_freq));
      for (std::size_t j = 0; j < p; ++j) {
        amp(k, j) = rng.uniform(-spec.amplitude, spec.amplitude);
        phase(k, j) = rng.uniform(0.0, two_pi);
      }
    }
    Matrix<double> tokens(T, p);
    auto proto = data.prototypes.row(label);
    for (std::size_t t = 0; t < T; ++t) {
      const double angle = two_pi * static_cast<double>(t) / static_cast<double>(T);
      for (std::size_t j = 0; j < p; ++j) {
        double v = proto[j];
        for (std::size_t k = 0; k < K; ++k) {
          v += amp(k, j) * std::sin(angle * static_cast<double>(freq[k]) + phase(k, j));
        }
        if (spec.noise_sigma > 0.0) v += rng.normal(0.0, spec.noise_sigma);
        tokens(t, j) = v;
      }
    }
    data.samples.push_back({std::move(tokens), label});
  }
  return data;
}

std::size_t oracle_label(const Matrix<double>& tokens, const Matrix<double>& prototypes) {
  if (tokens.cols() != prototypes.cols() || tokens.rows() == 0) {
    throw ShapeError("oracle_label: tokens " + tokens.shape_string() + " vs prototypes " +
                     prototypes.shape_string());
  }
  std::vector<double> mean(tokens.cols(), 0.0);
  for (std::size_t t = 0; t < tokens.rows(); ++t) {
    for (std::size_t j = 0; j < tokens.cols(); ++j) mean[j] += tokens(t, j);
  }
  for (auto& v : mean) v /= static_cast<double>(tokens.rows());
  std::size_t best = 0;
  double best_score = 0.0;
  for (std::size_t c = 0; c < prototypes.rows(); ++c) {
    double score = 0.0;
    for (std::size_t j = 0; j < mean.size(); ++j) score += mean[j] * prototypes(c, j);
    if (c == 0 || score > best_score) {
      best = c;
      best_score = score;
    }
  }
  return best;
}

std::pair<Dataset, Dataset> train_test_split(const Dataset& data) {
  const std::size_t cut = data.size() * 8 / 10;
  Dataset train{data.spec, data.prototypes, {}};
  Dataset test{data.spec, data.prototypes, {}};
  train.samples.assign(data.samples.begin(), data.samples.begin() + static_cast<std::ptrdiff_t>(cut));
  test.samples.assign(data.samples.begin() + static_cast<std::ptrdiff_t>(cut), data.samples.end());
  return {std::move(train), std::move(test)};
}

void dump_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  auto put32 = [&out](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  put32(static_cast<std::uint32_t>(data.spec.seq_len));
  put32(static_cast<std::uint32_t>(data.spec.patch_dim));
  put32(static_cast<std::uint32_t>(data.spec.num_classes));
  put32(static_cast<std::uint32_t>(data.size()));
  for (const auto& s : data.samples) {
    for (double v : s.tokens.data()) {
      const auto f = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&f), 4);
    }
    put32(static_cast<std::uint32_t>(s.label));
  }
  if (!out) throw Error("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  auto get32 = [&]() {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw Error("truncated dataset " + path.string());
    return v;
  };
  Dataset data;
  data.spec.seq_len = get32();
  data.spec.patch_dim = get32();
  data.spec.num_classes = get32();
  const std::uint32_t n = get32();
  data.samples.reserve(n);
  for (std::uint32_t s = 0; s < n; ++s) {
    Matrix<double> tokens(data.spec.seq_len, data.spec.patch_dim);
    for (auto& v : tokens.data()) {
      float f = 0.0f;
      if (!in.read(reinterpret_cast<char*>(&f), 4)) throw Error("truncated dataset " + path.string());
      v = f;
    }
    data.samples.push_back({std::move(tokens), get32()});
  }
  return data;
}

}  // namespace bamboo

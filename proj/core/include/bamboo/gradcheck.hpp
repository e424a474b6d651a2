#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "bamboo/autodiff.hpp"
#include "bamboo/mask.hpp"
#include "bamboo/model.hpp"
#include "bamboo/synth.hpp"
#include "bamboo/train.hpp"

namespace bamboo {

// Builds a scalar loss on the tape from leaf inputs (one per input matrix).
using GraphFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;
// The same graph in extended precision, used only for the finite differences.
using WideGraphFn =
    std::function<Var<long double>(Tape<long double>&, std::span<const Var<long double>>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients to central differences
// (f(x+h) - f(x-h)) / 2h for every input coordinate. Relative error uses
// max(|analytic|, |numeric|, 1e-8) as denominator. Requires h in [1e-6, 1e-4].
// When `wide` is given the perturbed losses come from it; reverse-mode
// gradients are always the 64-bit ones.
GradCheckResult grad_check(const GraphFn& graph, std::vector<Matrix<double>> inputs, double h,
                           const WideGraphFn& wide = nullptr);

// Checks the full training loss of one sample with respect to every
// parameter of a model built from `seed`. `mask` is required for the MAE
// objective and must be null for the classifier. Finite differences use the
// extended-precision graph so that roundoff in the loss (about 1e-11 at
// h = 1e-5 in 64-bit) does not swamp gradients that are zero by symmetry.
GradCheckResult grad_check_model(const ModelConfig& model, const TrainConfig& train,
                                 const Sample& sample, const MaskPlan* mask, std::uint64_t seed,
                                 double h);

}  // namespace bamboo

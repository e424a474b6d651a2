#include "bamboo/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace bamboo {
namespace {

template <typename T, typename Fn>
T evaluate(const Fn& graph, const std::vector<Matrix<T>>& inputs) {
  Tape<T> tape;
  std::vector<Var<T>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& m : inputs) leaves.push_back(tape.constant(m));
  const T loss = graph(tape, leaves).value()[0];
  if (!std::isfinite(loss)) throw NonFiniteError("grad_check: non-finite loss");
  return loss;
}

template <typename T, typename Fn>
double central_difference(const Fn& graph, std::vector<Matrix<T>>& inputs, std::size_t k,
                          std::size_t i, double h) {
  const T saved = inputs[k][i];
  inputs[k][i] = saved + static_cast<T>(h);
  const T up = evaluate(graph, inputs);
  inputs[k][i] = saved - static_cast<T>(h);
  const T down = evaluate(graph, inputs);
  inputs[k][i] = saved;
  return static_cast<double>((up - down) / (T{2} * static_cast<T>(h)));
}

}  // namespace

GradCheckResult grad_check(const GraphFn& graph, std::vector<Matrix<double>> inputs, double h,
                           const WideGraphFn& wide) {
  if (!(h >= 1e-6 && h <= 1e-4)) throw DomainError("grad_check: h must lie in [1e-6, 1e-4]");

  std::vector<Matrix<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& m : inputs) leaves.push_back(tape.leaf(m));
    const Var<double> loss = graph(tape, leaves);
    if (loss.value().size() != 1) throw ShapeError("grad_check: graph must return a scalar");
    if (!std::isfinite(loss.value()[0])) throw NonFiniteError("grad_check: non-finite loss");
    tape.backward(loss);
    for (const auto& leaf : leaves) analytic.push_back(tape.grad(leaf));
  }

  std::vector<Matrix<long double>> wide_inputs;
  if (wide) {
    for (const auto& m : inputs) wide_inputs.push_back(m.cast<long double>());
  }

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double numeric = wide ? central_difference(wide, wide_inputs, k, i, h)
                                  : central_difference(graph, inputs, k, i, h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      ++result.coordinates;
      if (err > result.max_relative_error || result.coordinates == 1) {
        result.max_relative_error = err;
        result.worst_input = k;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

GradCheckResult grad_check_model(const ModelConfig& model, const TrainConfig& train,
                                 const Sample& sample, const MaskPlan* mask, std::uint64_t seed,
                                 double h) {
  const auto params = build<double>(model, seed);
  std::vector<Matrix<double>> inputs;
  params.for_each([&inputs](std::string_view, const Matrix<double>& m) { inputs.push_back(m); });
  const bool has_cls = params.has_cls_token;
  const bool has_final_norm = params.has_final_norm;
  const std::size_t depth = params.blocks.size();
  auto loss = [&](auto& tape, auto leaves) {
    using T = typename std::remove_reference_t<decltype(tape)>::value_type;
    ModelWeights<Var<T>> weights;
    weights.has_cls_token = has_cls;
    weights.has_final_norm = has_final_norm;
    weights.blocks.resize(depth);
    std::size_t i = 0;
    weights.for_each([&](std::string_view, Var<T>& v) { v = leaves[i++]; });
    return sample_loss(tape, weights, model, train, sample, mask);
  };
  GraphFn graph = [&](Tape<double>& tape, std::span<const Var<double>> leaves) {
    return loss(tape, leaves);
  };
  WideGraphFn wide = [&](Tape<long double>& tape, std::span<const Var<long double>> leaves) {
    return loss(tape, leaves);
  };
  return grad_check(graph, std::move(inputs), h, wide);
}

}  // namespace bamboo

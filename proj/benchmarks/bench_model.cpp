#include <benchmark/benchmark.h>

#include "bamboo/model.hpp"
#include "bamboo/synth.hpp"
#include "bamboo/train.hpp"

namespace {

bamboo::ModelConfig config_for(benchmark::State& state) {
  bamboo::ModelConfig m;
  m.depth = static_cast<std::size_t>(state.range(0));
  m.width = static_cast<std::size_t>(state.range(1));
  m.heads = m.width / 16;
  m.seq_len = static_cast<std::size_t>(state.range(2));
  m.patch_dim = 16;
  m.num_classes = 4;
  if (state.range(3) == 1) m.activation = bamboo::Activation::relu;
  return m;
}

bamboo::Sample sample_for(const bamboo::ModelConfig& m) {
  bamboo::SyntheticSpec spec;
  spec.seq_len = m.seq_len;
  spec.patch_dim = m.patch_dim;
  spec.num_classes = m.num_classes;
  return bamboo::generate(spec, 1).samples.front();
}

void BM_Forward(benchmark::State& state) {
  const auto m = config_for(state);
  const auto params = bamboo::build<float>(m, 1);
  const auto tokens = sample_for(m).tokens.cast<float>();
  for (auto _ : state) {
    auto out = bamboo::forward(params, m, tokens, nullptr, bamboo::HeadKind::classify, false);
    benchmark::DoNotOptimize(out.output.data().data());
  }
}

// Forward plus backward of one training sample.
void BM_TrainStep(benchmark::State& state) {
  const auto m = config_for(state);
  const auto params = bamboo::build<float>(m, 1);
  const auto sample = sample_for(m);
  bamboo::TrainConfig train;
  for (auto _ : state) {
    bamboo::Tape<float> tape;
    const auto weights = bamboo::place_on_tape(tape, params, true);
    const auto loss = bamboo::sample_loss(tape, weights, m, train, sample, nullptr);
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.value().data().data());
  }
}

}  // namespace

// depth, width, tokens, activation (0 gelu, 1 relu)
BENCHMARK(BM_Forward)->Args({4, 64, 32, 0})->Args({4, 64, 32, 1})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_TrainStep)
    ->Args({4, 64, 32, 0})
    ->Args({4, 64, 32, 1})
    ->Args({8, 64, 16, 1})
    ->Args({16, 32, 16, 1})
    ->Unit(benchmark::kMicrosecond);
BENCHMARK_MAIN();

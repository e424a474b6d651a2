#include "bamboo/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace bamboo {
namespace {

constexpr std::uint64_t kInitStream = 10;
constexpr std::uint64_t kMaskStream = 11;
constexpr std::uint64_t kShuffleStream = 12;

template <typename T>
std::vector<Matrix<T>*> tensors(Parameters<T>& params) {
  std::vector<Matrix<T>*> out;
  params.for_each([&out](std::string_view, Matrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::vector<const Matrix<T>*> tensors(const Parameters<T>& params) {
  std::vector<const Matrix<T>*> out;
  params.for_each([&out](std::string_view, const Matrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::size_t argmax_row(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.integer(0, i - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

}  // namespace

Objective parse_objective(const std::string& name) {
  if (name == "classifier") return Objective::classifier;
  if (name == "mae") return Objective::mae;
  throw ConfigError("unknown objective '" + name + "' (expected classifier or mae)");
}

MaeTarget parse_mae_target(const std::string& name) {
  if (name == "continuous") return MaeTarget::continuous;
  if (name == "discrete") return MaeTarget::discrete;
  throw ConfigError("unknown mae target '" + name + "' (expected continuous or discrete)");
}

std::string to_string(Objective objective) {
  return objective == Objective::classifier ? "classifier" : "mae";
}

std::string to_string(MaeTarget target) {
  return target == MaeTarget::continuous ? "continuous" : "discrete";
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid train config: " + msg); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    fail("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (objective == Objective::mae && !(mask_ratio > 0.0 && mask_ratio < 1.0)) {
    fail("mask_ratio must lie in (0, 1) for the mae objective");
  }
}

template <typename T>
Matrix<T> normalize_patches(const Matrix<T>& targets) {
  Matrix<T> out(targets.rows(), targets.cols());
  const auto n = static_cast<double>(targets.cols());
  for (std::size_t r = 0; r < targets.rows(); ++r) {
    auto in = targets.row(r);
    double mean = 0.0;
    for (T v : in) mean += v;
    mean /= n;
    double var = 0.0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kPatchNormEps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = static_cast<T>((in[c] - mean) * inv);
  }
  return out;
}

template <typename T>
T mae_loss(const Matrix<T>& pred, const Matrix<T>& targets, bool per_patch_norm) {
  if (pred.rows() == 0 || targets.rows() == 0) throw DomainError("empty mask");
  require_same_shape(pred, targets, "mae_loss");
  const Matrix<T> y = per_patch_norm ? normalize_patches(targets) : targets;
  T total{0};
  for (std::size_t i = 0; i < pred.size(); ++i) total += (pred[i] - y[i]) * (pred[i] - y[i]);
  return total / static_cast<T>(pred.size());
}

template <typename T>
T cls_loss(const Matrix<T>& logits, std::size_t label) {
  Tape<T> tape;
  return ad::cross_entropy(tape.constant(logits), label).value()[0];
}

template <typename T>
Matrix<T> mae_targets(const Matrix<T>& tokens, const MaskPlan& mask, bool per_patch_norm) {
  if (mask.positions.empty()) throw DomainError("empty mask");
  validate_mask(mask, tokens.rows());
  Matrix<T> out(mask.count(), tokens.cols());
  for (std::size_t i = 0; i < mask.count(); ++i) {
    auto src = tokens.row(mask.positions[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return per_patch_norm ? normalize_patches(out) : out;
}

std::vector<std::size_t> discrete_targets(const Matrix<double>& tokens, const MaskPlan& mask) {
  validate_mask(mask, tokens.rows());
  std::vector<std::size_t> ids;
  ids.reserve(mask.count());
  for (auto p : mask.positions) ids.push_back(argmax_row(tokens.row(p)));
  return ids;
}

AdamConfig adam_config(const TrainConfig& config) {
  return {config.learning_rate, config.beta1, config.beta2, config.adam_eps, config.weight_decay};
}

template <typename T>
void adam_step(TrainState<T>& state, const Parameters<T>& gradients, const AdamConfig& adam) {
  {
    std::string bad;
    gradients.for_each([&bad](std::string_view name, const Matrix<T>& g) {
      if (bad.empty() && !g.all_finite()) bad = std::string(name);
    });
    if (!bad.empty()) {
      throw NonFiniteError("adam_step: non-finite gradient in tensor '" + bad + "' at step " +
                           std::to_string(state.step + 1));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(adam.beta1, t);
  const double correct2 = 1.0 - std::pow(adam.beta2, t);
  auto params = tensors(state.params);
  auto m1 = tensors(state.first_moment);
  auto m2 = tensors(state.second_moment);
  auto grads = tensors(gradients);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->data();
    auto m = m1[k]->data();
    auto v = m2[k]->data();
    auto g = grads[k]->data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = adam.beta1 * m[i] + (1.0 - adam.beta1) * gi;
      const double vi = adam.beta2 * v[i] + (1.0 - adam.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / correct1) / (std::sqrt(vi / correct2) + adam.eps) +
                            adam.weight_decay * static_cast<double>(p[i]);
      p[i] = static_cast<T>(p[i] - adam.learning_rate * update);
    }
  }
}

template <typename T>
TrainState<T> initial_state(Parameters<T> params) {
  TrainState<T> state;
  state.first_moment = zeros_like(params);
  state.second_moment = zeros_like(params);
  state.params = std::move(params);
  return state;
}

std::uint64_t init_seed(const TrainConfig& config) { return derive_seed(config.seed, kInitStream); }

template <typename T>
Var<T> sample_loss(Tape<T>& tape, const ModelWeights<Var<T>>& weights, const ModelConfig& model,
                   const TrainConfig& train, const Sample& sample, const MaskPlan* mask,
                   std::size_t* predicted_label) {
  const Matrix<T> tokens = sample.tokens.template cast<T>();
  if (train.objective == Objective::classifier) {
    auto g = forward_graph(tape, weights, model, tokens, {}, HeadKind::classify);
    if (predicted_label) *predicted_label = argmax_row(g.output.value().row(0));
    return ad::cross_entropy(g.output, sample.label);
  }
  if (!mask || mask->positions.empty()) throw DomainError("empty mask");
  auto g = forward_graph(tape, weights, model, tokens, mask->positions, HeadKind::reconstruct);
  if (train.mae_target == MaeTarget::continuous) {
    return ad::mse(g.output, mae_targets(tokens, *mask, train.per_patch_norm));
  }
  const auto ids = discrete_targets(sample.tokens, *mask);
  Var<T> total;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::size_t row = i;
    Var<T> term = ad::cross_entropy(ad::gather_rows(g.output, std::span<const std::size_t>(&row, 1)),
                                    ids[i]);
    total = i == 0 ? term : ad::add(total, term);
  }
  return ad::scale(total, T{1} / static_cast<T>(ids.size()));
}

template <typename T>
TrainState<T> train(const ModelConfig& model, const TrainConfig& config, const Dataset& data,
                    const Parameters<T>* start) {
  model.validate();
  config.validate();
  if (data.size() == 0) throw DomainError("train: empty dataset");
  if (data.spec.seq_len != model.seq_len || data.spec.patch_dim != model.patch_dim) {
    throw ConfigError("train: dataset shape [" + std::to_string(data.spec.seq_len) + "x" +
                      std::to_string(data.spec.patch_dim) + "] does not match the model");
  }
  if (config.objective == Objective::classifier && data.spec.num_classes > model.num_classes) {
    throw ConfigError("train: dataset has more classes than the classifier head");
  }

  TrainState<T> state = initial_state(start ? *start : build<T>(model, init_seed(config)));
  const AdamConfig adam = adam_config(config);
  Rng mask_rng(derive_seed(config.seed, kMaskStream));
  Rng shuffle_rng(derive_seed(config.seed, kShuffleStream));
  Parameters<T> grads = zeros_like(state.params);
  auto grad_list = tensors(grads);

  try {
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
      const auto order = shuffled(data.size(), shuffle_rng);
      double loss_sum = 0.0;
      std::size_t correct = 0;
      for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
        const std::size_t end = std::min(order.size(), begin + config.batch_size);
        for (auto* g : grad_list) g->fill(T{0});
        for (std::size_t i = begin; i < end; ++i) {
          const Sample& sample = data.samples[order[i]];
          std::optional<MaskPlan> mask;
          if (config.objective == Objective::mae) {
            mask = sample_mask(model.seq_len, config.mask_ratio, mask_rng);
          }
          Tape<T> tape;
          const auto weights = place_on_tape(tape, state.params, true);
          std::size_t predicted = 0;
          Var<T> loss = sample_loss(tape, weights, model, config, sample,
                                    mask ? &*mask : nullptr, &predicted);
          const double value = loss.value()[0];
          if (!std::isfinite(value)) throw NonFiniteError("non-finite loss");
          loss_sum += value;
          if (config.objective == Objective::classifier && predicted == sample.label) ++correct;
          tape.backward(loss);
          std::size_t k = 0;
          weights.for_each([&](std::string_view, const Var<T>& v) {
            const auto& g = tape.upstream(v.id);
            Matrix<T>& acc = *grad_list[k++];
            if (g.empty()) return;
            auto dst = acc.data();
            auto src = g.data();
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
          });
        }
        const T inv = T{1} / static_cast<T>(end - begin);
        for (auto* g : grad_list) {
          for (auto& v : g->data()) v *= inv;
        }
        adam_step(state, grads, adam);
      }
      EpochRecord record;
      record.epoch = epoch;
      record.mean_loss = loss_sum / static_cast<double>(data.size());
      if (config.objective == Objective::classifier) {
        record.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
      }
      state.history.push_back(record);
    }
  } catch (const NonFiniteError& e) {
    state.diverged = true;
    state.failure = std::string("training diverged: ") + e.what();
  }
  return state;
}

template <typename T>
Parameters<T> reinitialize_heads(const Parameters<T>& encoder, const Parameters<T>& heads) {
  Parameters<T> out = encoder;
  out.classifier = heads.classifier;
  out.classifier_bias = heads.classifier_bias;
  out.reconstruction = heads.reconstruction;
  out.reconstruction_bias = heads.reconstruction_bias;
  return out;
}

template <typename T>
TrainState<T> finetune_from(const ModelConfig& model, const TrainConfig& finetune,
                            const Dataset& data, const ModelConfig& pretrained_model,
                            const Parameters<T>& pretrained) {
  if (!(model == pretrained_model)) {
    throw ConfigError("fine-tuning model config differs from the pretrained model config");
  }
  if (finetune.objective != Objective::classifier) {
    throw ConfigError("fine-tuning stage must use the classifier objective");
  }
  const Parameters<T> start =
      reinitialize_heads(pretrained, build<T>(model, init_seed(finetune)));
  return train<T>(model, finetune, data, &start);
}

template <typename T>
TwoStageResult<T> pretrain_then_finetune(const ModelConfig& model, const TrainConfig& pretrain,
                                         const TrainConfig& finetune,
                                         const Dataset& pretrain_data,
                                         const Dataset& finetune_data) {
  if (pretrain.objective != Objective::mae) {
    throw ConfigError("pretraining stage must use the mae objective");
  }
  TwoStageResult<T> result;
  result.pretrain = train<T>(model, pretrain, pretrain_data);
  if (result.pretrain.diverged) {
    result.finetune.diverged = true;
    result.finetune.failure = result.pretrain.failure;
    return result;
  }
  result.finetune = finetune_from(model, finetune, finetune_data, model, result.pretrain.params);
  return result;
}

template <typename T>
double evaluate_accuracy(const Parameters<T>& params, const ModelConfig& model,
                         const Dataset& data) {
  if (data.size() == 0) throw DomainError("evaluate_accuracy: empty dataset");
  std::size_t correct = 0;
  for (const auto& s : data.samples) {
    const auto out = forward(params, model, s.tokens.template cast<T>(), nullptr,
                             HeadKind::classify, false);
    if (argmax_row(out.output.row(0)) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename T>
double evaluate_mae_loss(const Parameters<T>& params, const ModelConfig& model,
                         const TrainConfig& config, const Dataset& data,
                         std::uint64_t mask_seed) {
  if (data.size() == 0) throw DomainError("evaluate_mae_loss: empty dataset");
  Rng rng(mask_seed);
  const auto weights_params = params;
  double total = 0.0;
  TrainConfig probe = config;
  probe.objective = Objective::mae;
  for (const auto& s : data.samples) {
    const MaskPlan mask = sample_mask(model.seq_len, config.mask_ratio, rng);
    Tape<T> tape;
    const auto weights = place_on_tape(tape, weights_params, false);
    total += sample_loss(tape, weights, model, probe, s, &mask).value()[0];
  }
  return total / static_cast<double>(data.size());
}

std::vector<LossCurveRow> loss_curve(const std::string& stage,
                                     const std::vector<EpochRecord>& history) {
  std::vector<LossCurveRow> rows;
  for (const auto& r : history) rows.push_back({stage, r});
  return rows;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossCurveRow>& rows,
                    bool append) {
  const bool header = !append || !std::filesystem::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  if (header) out << "stage,epoch,mean_loss,accuracy\n";
  char buf[64];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%.10g", row.record.mean_loss);
    out << row.stage << ',' << row.record.epoch << ',' << buf << ',';
    if (row.record.accuracy) {
      std::snprintf(buf, sizeof(buf), "%.10g", *row.record.accuracy);
      out << buf;
    }
    out << '\n';
  }
}

#define BAMBOO_INSTANTIATE(T)                                                                    \
  template Matrix<T> normalize_patches(const Matrix<T>&);                                        \
  template T mae_loss(const Matrix<T>&, const Matrix<T>&, bool);                                 \
  template T cls_loss(const Matrix<T>&, std::size_t);                                            \
  template Matrix<T> mae_targets(const Matrix<T>&, const MaskPlan&, bool);                       \
  template void adam_step(TrainState<T>&, const Parameters<T>&, const AdamConfig&);              \
  template TrainState<T> initial_state(Parameters<T>);                                           \
  template Var<T> sample_loss(Tape<T>&, const ModelWeights<Var<T>>&, const ModelConfig&,         \
                              const TrainConfig&, const Sample&, const MaskPlan*, std::size_t*); \
  template TrainState<T> train(const ModelConfig&, const TrainConfig&, const Dataset&,           \
                               const Parameters<T>*);                                            \
  template Parameters<T> reinitialize_heads(const Parameters<T>&, const Parameters<T>&);         \
  template TrainState<T> finetune_from(const ModelConfig&, const TrainConfig&, const Dataset&,   \
                                       const ModelConfig&, const Parameters<T>&);                \
  template TwoStageResult<T> pretrain_then_finetune(const ModelConfig&, const TrainConfig&,      \
                                                    const TrainConfig&, const Dataset&,          \
                                                    const Dataset&);                             \
  template double evaluate_accuracy(const Parameters<T>&, const ModelConfig&, const Dataset&);   \
  template double evaluate_mae_loss(const Parameters<T>&, const ModelConfig&,                    \
                                    const TrainConfig&, const Dataset&, std::uint64_t);

BAMBOO_INSTANTIATE(float)
BAMBOO_INSTANTIATE(double)
BAMBOO_INSTANTIATE(long double)

#undef BAMBOO_INSTANTIATE

}  // namespace bamboo

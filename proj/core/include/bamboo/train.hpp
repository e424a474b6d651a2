#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bamboo/mask.hpp"
#include "bamboo/model.hpp"
#include "bamboo/synth.hpp"

namespace bamboo {

enum class Objective { classifier, mae };

// Reconstruction target of the MAE objective. Continuous regresses the
// (optionally per-patch normalized) patch; discrete predicts the index of
// the patch's largest coordinate, a p-way token vocabulary.
enum class MaeTarget { continuous, discrete };

Objective parse_objective(const std::string& name);
MaeTarget parse_mae_target(const std::string& name);
std::string to_string(Objective objective);
std::string to_string(MaeTarget target);

inline constexpr double kContinuousMaskRatio = 0.75;
inline constexpr double kDiscreteMaskRatio = 0.15;
inline constexpr double kPatchNormEps = 1e-6;

struct TrainConfig {
  Objective objective = Objective::classifier;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double mask_ratio = kContinuousMaskRatio;
  MaeTarget mae_target = MaeTarget::continuous;
  bool per_patch_norm = true;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  std::optional<double> accuracy;  // classifier objective only
};

template <typename T>
struct TrainState {
  Parameters<T> params;
  Parameters<T> first_moment;
  Parameters<T> second_moment;
  std::size_t step = 0;
  std::vector<EpochRecord> history;
  bool diverged = false;
  std::string failure;  // set when diverged
};

// Zero mean / unit variance per row (population variance, eps 1e-6).
template <typename T>
Matrix<T> normalize_patches(const Matrix<T>& targets);

// Mean squared error over all entries; targets are normalized per row first
// when per_patch_norm is set. Throws DomainError for an empty mask.
template <typename T>
T mae_loss(const Matrix<T>& pred, const Matrix<T>& targets, bool per_patch_norm);

template <typename T>
T cls_loss(const Matrix<T>& logits, std::size_t label);

// Original tokens at the masked positions, normalized when requested.
template <typename T>
Matrix<T> mae_targets(const Matrix<T>& tokens, const MaskPlan& mask, bool per_patch_norm);

// Discrete vocabulary ids (argmax coordinate) of the masked tokens.
std::vector<std::size_t> discrete_targets(const Matrix<double>& tokens, const MaskPlan& mask);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

AdamConfig adam_config(const TrainConfig& config);

// Adam with bias correction and decoupled weight decay. Throws
// NonFiniteError naming the tensor if any gradient is NaN/Inf.
template <typename T>
void adam_step(TrainState<T>& state, const Parameters<T>& gradients, const AdamConfig& adam);

template <typename T>
TrainState<T> initial_state(Parameters<T> params);

// Seed used to initialize a model for a training config.
std::uint64_t init_seed(const TrainConfig& config);

// Loss of one sample as a tape graph; used by training and gradient checks.
template <typename T>
Var<T> sample_loss(Tape<T>& tape, const ModelWeights<Var<T>>& weights, const ModelConfig& model,
                   const TrainConfig& train, const Sample& sample, const MaskPlan* mask,
                   std::size_t* predicted_label = nullptr);

// Trains from a fresh initialization (or `start` when given) for a fixed
// number of epochs. Divergence stops training and returns the last good
// state with `diverged` set.
template <typename T>
TrainState<T> train(const ModelConfig& model, const TrainConfig& config, const Dataset& data,
                    const Parameters<T>* start = nullptr);

template <typename T>
struct TwoStageResult {
  TrainState<T> pretrain;
  TrainState<T> finetune;
};

// MAE pretraining, then classifier fine-tuning from the pretrained encoder
// with the heads re-initialized from the fine-tuning seed.
template <typename T>
TwoStageResult<T> pretrain_then_finetune(const ModelConfig& model, const TrainConfig& pretrain,
                                         const TrainConfig& finetune,
                                         const Dataset& pretrain_data,
                                         const Dataset& finetune_data);

// Fine-tuning stage alone. `pretrained_model` must equal `model`.
template <typename T>
TrainState<T> finetune_from(const ModelConfig& model, const TrainConfig& finetune,
                            const Dataset& data, const ModelConfig& pretrained_model,
                            const Parameters<T>& pretrained);

// Encoder from `encoder`, heads (classifier, reconstruction) from `heads`.
template <typename T>
Parameters<T> reinitialize_heads(const Parameters<T>& encoder, const Parameters<T>& heads);

template <typename T>
double evaluate_accuracy(const Parameters<T>& params, const ModelConfig& model,
                         const Dataset& data);

// Mean masked-reconstruction loss with masks drawn from `mask_seed`.
template <typename T>
double evaluate_mae_loss(const Parameters<T>& params, const ModelConfig& model,
                         const TrainConfig& config, const Dataset& data,
                         std::uint64_t mask_seed);

struct LossCurveRow {
  std::string stage;
  EpochRecord record;
};

std::vector<LossCurveRow> loss_curve(const std::string& stage,
                                     const std::vector<EpochRecord>& history);

// CSV with header stage,epoch,mean_loss,accuracy; accuracy blank when absent.
void write_loss_csv(const std::filesystem::path& path, const std::vector<LossCurveRow>& rows,
                    bool append);

}  // namespace bamboo

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bamboo/model.hpp"
#include "bamboo/synth.hpp"
#include "bamboo/train.hpp"

namespace bamboo {

// Which hidden rows a metric is evaluated over.
enum class PositionMode { all, masked, non_special };

PositionMode parse_position_mode(const std::string& name);
std::string to_string(PositionMode mode);

// Denominator of the token mean inside the mean-token-std metric. The
// default is an ordinary mean (1/T); the alternative reproduces the 1/(T-1)
// variant for comparison.
enum class MeanDenominator { tokens, tokens_minus_one };

std::vector<std::size_t> select_positions(const ActivationTrace& trace, PositionMode mode);

// Per-dimension sample standard deviation across the selected tokens
// (denominator T'-1), averaged over dimensions. Needs >= 2 positions.
double mean_token_std(const Matrix<double>& layer, std::span<const std::size_t> positions,
                      MeanDenominator mean_denominator = MeanDenominator::tokens);
double mean_token_std(const ActivationTrace& trace, std::size_t layer,
                      std::span<const std::size_t> positions,
                      MeanDenominator mean_denominator = MeanDenominator::tokens);

struct PairCosine {
  double value = 0.0;
  bool degenerate = false;  // some pair had both centered norms below eps
};

inline constexpr double kDegenerateNormEps = 1e-12;

// Mean cosine similarity over all unordered pairs of token-centered rows.
// A pair with both norms < eps counts as 1 (and flags degeneracy); a pair
// with exactly one norm < eps counts as 0.
PairCosine centered_pair_cosine(const Matrix<double>& layer, std::span<const std::size_t> positions,
                                double eps = kDegenerateNormEps);
PairCosine centered_pair_cosine(const ActivationTrace& trace, std::size_t layer,
                                std::span<const std::size_t> positions,
                                double eps = kDegenerateNormEps);

// Population variance of all entries after centering each dimension across
// the selected tokens.
double layer_variance(const Matrix<double>& layer, std::span<const std::size_t> positions);

// Layer variance for h^0..h^L.
std::vector<double> variance_trace(const ActivationTrace& trace, PositionMode mode);

struct LayerDiagnostics {
  std::size_t layer = 0;
  double ms = 0.0;
  double centered_cos = 0.0;
  double var = 0.0;
  bool degenerate = false;
};

struct ReportMetadata {
  std::string model_id;
  std::string objective;
  std::string config;
  std::uint64_t seed = 0;
  PositionMode positions = PositionMode::non_special;
  std::string extra;  // free-form key=value pairs appended to the header
};

struct DiagnosticReport {
  std::vector<LayerDiagnostics> layers;  // h^0..h^L
  std::vector<double> delta_var;         // Var(h^{l+1}) - Var(h^l), length L
  std::vector<std::size_t> degenerate_layers;
  ReportMetadata metadata;
  std::size_t traces = 0;  // number of traces averaged
  std::optional<double> sigma_sq_targets;

  double mean_delta_var() const;
  // Least-squares slope of ms against layer index.
  double ms_slope() const;
  double final_centered_cos() const { return layers.back().centered_cos; }
};

DiagnosticReport diagnose(const ActivationTrace& trace, PositionMode mode,
                          ReportMetadata metadata = {});

// Per-layer metrics averaged over traces; a layer is degenerate if it was in
// any trace.
DiagnosticReport diagnose_all(std::span<const ActivationTrace> traces, PositionMode mode,
                              ReportMetadata metadata = {});

// CSV: one "#" metadata line, then layer,ms,centered_cos,var,delta_var,degenerate.
// delta_var on row l is Var(h^{l+1}) - Var(h^l); blank on the last row.
void write_report_csv(const std::filesystem::path& path, const DiagnosticReport& report);
std::string report_csv(const DiagnosticReport& report);

// ---- empirical verifiers ----

inline constexpr double kStrictSlack = 1e-9;

// Token-centered variance of h^0..h^L for a freshly built model (64-bit) on a
// standard-normal input drawn from the seed.
std::vector<double> init_variance_profile(const ModelConfig& config, std::uint64_t seed);

struct Lemma2Report {
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> variances;  // per seed, h^0..h^L
  std::vector<bool> passed;                    // per seed
  double pass_fraction = 0.0;
};

// Requires residual = false. A seed passes when every layer lowers the
// variance by more than kStrictSlack.
Lemma2Report verify_lemma2(const ModelConfig& config, std::span<const std::uint64_t> seeds);

// Residual counterpart: fraction of seeds whose variance never decreases
// (by more than kStrictSlack) along depth at initialization.
Lemma2Report check_residual_growth(const ModelConfig& config, std::span<const std::uint64_t> seeds);

enum class VerifyStatus { pass, fail, inconclusive, precondition_unmet };

std::string to_string(VerifyStatus status);
int exit_code(VerifyStatus status);

struct Lemma1Report {
  double loss = 0.0;       // mean masked-reconstruction loss
  double sigma_sq = 0.0;   // variance of (normalized) masked targets
  double var_pred = 0.0;   // variance of masked reconstructions
  double tolerance = 0.3;
  double convergence_factor = 0.3;
  bool converged = false;
  VerifyStatus status = VerifyStatus::precondition_unmet;
};

// Per-sample reconstructions and targets at masked positions. Variances are
// token-centered per sample and averaged over samples.
Lemma1Report assess_lemma1(std::span<const Matrix<double>> predictions,
                           std::span<const Matrix<double>> targets, double tolerance,
                           double convergence_factor);

template <typename T>
Lemma1Report verify_lemma1(const Parameters<T>& params, const ModelConfig& model,
                           const TrainConfig& mae_config, const Dataset& data, double tolerance,
                           double convergence_factor, std::uint64_t mask_seed);

// One side of a theorem comparison.
template <typename T>
struct TracedModel {
  const Parameters<T>* params = nullptr;
  std::string objective;
  // Evaluate on masked inputs with this ratio; unmasked when absent.
  std::optional<double> mask_ratio;
};

struct TheoremReport {
  DiagnosticReport mae;
  DiagnosticReport classifier;
  double mae_mean_delta = 0.0;
  double classifier_mean_delta = 0.0;
  VerifyStatus status = VerifyStatus::inconclusive;  // pass: MAE larger, tie: inconclusive
};

template <typename T>
TheoremReport compare_residual_delta(const TracedModel<T>& mae, const TracedModel<T>& classifier,
                                     const ModelConfig& mae_config,
                                     const ModelConfig& classifier_config, const Dataset& data,
                                     std::uint64_t mask_seed,
                                     PositionMode mode = PositionMode::non_special);

// Traces of a model over a dataset (optionally masked with ratio from seed).
template <typename T>
std::vector<ActivationTrace> collect_traces(const Parameters<T>& params, const ModelConfig& config,
                                            const Dataset& data, std::optional<double> mask_ratio,
                                            std::uint64_t mask_seed);

}  // namespace bamboo

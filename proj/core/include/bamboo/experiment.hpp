#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bamboo/diagnostics.hpp"
#include "bamboo/model.hpp"
#include "bamboo/planner.hpp"
#include "bamboo/synth.hpp"
#include "bamboo/train.hpp"

namespace bamboo {

enum class Precision { f32, f64 };

Precision parse_precision(const std::string& name);
std::string to_string(Precision precision);

// `precision` unless BAMBOO_PRECISION is set.
Precision effective_precision(Precision precision);

enum class ExperimentKind { train, objective_pair, depth_sweep };

ExperimentKind parse_experiment_kind(const std::string& name);
std::string to_string(ExperimentKind kind);

struct DataSection {
  SyntheticSpec spec;
  std::size_t samples = 256;  // split 80/20 into train and held-out
};

struct DiagnosticsSection {
  PositionMode positions = PositionMode::non_special;
  std::vector<std::size_t> layers;  // empty: all of h^0..h^L
  std::size_t eval_samples = 32;    // held-out sequences traced
  bool mask_mae_inputs = false;     // trace the MAE model on masked inputs
  std::uint64_t mask_seed = 7;
};

struct OutputSection {
  std::filesystem::path directory = "out";
  bool svg = false;
};

struct SweepSection {
  std::vector<std::size_t> depths{2, 4, 8, 16};
  std::size_t reference_depth = 2;
  std::size_t reference_width = 128;
  std::size_t head_dim = 16;
  Band band;
};

struct VerifySection {
  double tolerance = 0.3;
  double convergence_factor = 0.3;
  double pass_fraction = 0.95;
  bool check_residual = true;  // lemma2: also require growth with residuals
  std::vector<std::uint64_t> seeds;  // lemma2 init seeds; repeat_seeds when empty
};

struct ExperimentSpec {
  std::string name = "experiment";
  ExperimentKind kind = ExperimentKind::train;
  ModelConfig model;
  TrainConfig train;
  std::optional<TrainConfig> pretrain;
  DataSection data;
  DiagnosticsSection diagnostics;
  OutputSection outputs;
  std::vector<std::uint64_t> repeat_seeds{0};
  Precision precision = Precision::f32;
  SweepSection sweep;
  VerifySection verify;

  void validate() const;
};

// Unknown keys and wrong types are ConfigErrors naming the offending path.
ExperimentSpec parse_experiment(const nlohmann::json& doc);
ExperimentSpec load_experiment(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentSpec& spec);
// Compact one-line form of the resolved spec.
std::string resolved_spec(const ExperimentSpec& spec);

struct RunOutcome {
  int exit_code = 0;
  std::vector<std::filesystem::path> files;  // written, in order
  std::string message;
};

// Trains per spec for every seed and writes CSV (and optional SVG) reports
// under spec.outputs.directory.
RunOutcome run_experiment(const ExperimentSpec& spec, std::ostream& log);

enum class VerifyTarget { lemma1, lemma2, theorem1 };

VerifyTarget parse_verify_target(const std::string& name);
std::string to_string(VerifyTarget target);

struct VerifyOutcome {
  VerifyStatus status = VerifyStatus::fail;
  std::filesystem::path report;
  std::string summary;
};

VerifyOutcome run_verify(VerifyTarget target, const ExperimentSpec& spec, std::ostream& log);

struct SeriesPlot {
  std::string label;
  std::vector<double> values;
};

// Self-contained line plot over layer index.
std::string line_plot_svg(const std::string& title, const std::string& y_label,
                          const std::vector<SeriesPlot>& series);

}  // namespace bamboo

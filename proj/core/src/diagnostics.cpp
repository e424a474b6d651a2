#include "bamboo/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "bamboo/random.hpp"

namespace bamboo {
namespace {

constexpr std::uint64_t kInputStream = 20;

void require_positions(std::span<const std::size_t> positions, std::size_t rows, const char* what) {
  for (auto p : positions) {
    if (p >= rows) throw DomainError(std::string(what) + ": position out of range");
  }
}

// Token mean per dimension over the selected rows.
std::vector<double> token_mean(const Matrix<double>& h, std::span<const std::size_t> positions,
                               double denominator) {
  std::vector<double> mean(h.cols(), 0.0);
  for (auto t : positions) {
    auto row = h.row(t);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += row[j];
  }
  for (auto& v : mean) v /= denominator;
  return mean;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

PositionMode parse_position_mode(const std::string& name) {
  if (name == "all") return PositionMode::all;
  if (name == "masked") return PositionMode::masked;
  if (name == "non_special") return PositionMode::non_special;
  throw ConfigError("unknown positions mode '" + name + "' (expected all, masked or non_special)");
}

std::string to_string(PositionMode mode) {
  switch (mode) {
    case PositionMode::all:
      return "all";
    case PositionMode::masked:
      return "masked";
    case PositionMode::non_special:
      return "non_special";
  }
  return "?";
}

std::vector<std::size_t> select_positions(const ActivationTrace& trace, PositionMode mode) {
  std::vector<std::size_t> out;
  const std::size_t rows = trace.layers.empty() ? 0 : trace.layers.front().rows();
  for (std::size_t r = 0; r < rows; ++r) {
    const bool special = r < trace.special.size() && trace.special[r];
    const bool masked = r < trace.masked.size() && trace.masked[r];
    if (mode == PositionMode::all || (mode == PositionMode::non_special && !special) ||
        (mode == PositionMode::masked && masked)) {
      out.push_back(r);
    }
  }
  return out;
}

double mean_token_std(const Matrix<double>& layer, std::span<const std::size_t> positions,
                      MeanDenominator mean_denominator) {
  const std::size_t n = positions.size();
  if (n < 2) throw DomainError("ms undefined for T<2");
  require_positions(positions, layer.rows(), "mean_token_std");
  const double denom = mean_denominator == MeanDenominator::tokens ? static_cast<double>(n)
                                                                   : static_cast<double>(n - 1);
  const auto mean = token_mean(layer, positions, denom);
  std::vector<double> sq(layer.cols(), 0.0);
  for (auto t : positions) {
    auto row = layer.row(t);
    for (std::size_t j = 0; j < sq.size(); ++j) sq[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
  }
  double total = 0.0;
  for (double s : sq) total += std::sqrt(s / static_cast<double>(n - 1));
  return total / static_cast<double>(layer.cols());
}

double mean_token_std(const ActivationTrace& trace, std::size_t layer,
                      std::span<const std::size_t> positions, MeanDenominator mean_denominator) {
  if (layer >= trace.layers.size()) throw DomainError("mean_token_std: layer out of range");
  return mean_token_std(trace.layers[layer], positions, mean_denominator);
}

PairCosine centered_pair_cosine(const Matrix<double>& layer, std::span<const std::size_t> positions,
                                double eps) {
  const std::size_t n = positions.size();
  if (n < 2) throw DomainError("centered_pair_cosine: needs at least 2 positions");
  require_positions(positions, layer.rows(), "centered_pair_cosine");
  const std::size_t d = layer.cols();
  Matrix<double> centered(n, d);
  if (n == 2) {
    // Half-differences, so the two rows are exact negatives.
    auto a = layer.row(positions[0]);
    auto b = layer.row(positions[1]);
    for (std::size_t j = 0; j < d; ++j) {
      centered(0, j) = (a[j] - b[j]) / 2.0;
      centered(1, j) = -centered(0, j);
    }
  } else {
    const auto mean = token_mean(layer, positions, static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      auto src = layer.row(positions[i]);
      auto dst = centered.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] = src[j] - mean[j];
    }
  }
  std::vector<double> sq(n), norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (double v : centered.row(i)) sq[i] += v * v;
    norms[i] = std::sqrt(sq[i]);
  }
  PairCosine result;
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const bool small_a = norms[a] < eps, small_b = norms[b] < eps;
      if (small_a && small_b) {
        total += 1.0;
        result.degenerate = true;
      } else if (small_a || small_b) {
        total += 0.0;
      } else {
        double dot = 0.0;
        auto ra = centered.row(a);
        auto rb = centered.row(b);
        for (std::size_t j = 0; j < d; ++j) dot += ra[j] * rb[j];
        total += dot / std::sqrt(sq[a] * sq[b]);
      }
    }
  }
  result.value = total / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
  return result;
}

PairCosine centered_pair_cosine(const ActivationTrace& trace, std::size_t layer,
                                std::span<const std::size_t> positions, double eps) {
  if (layer >= trace.layers.size()) throw DomainError("centered_pair_cosine: layer out of range");
  return centered_pair_cosine(trace.layers[layer], positions, eps);
}

double layer_variance(const Matrix<double>& layer, std::span<const std::size_t> positions) {
  const std::size_t n = positions.size();
  if (n == 0 || layer.cols() == 0) return 0.0;
  require_positions(positions, layer.rows(), "layer_variance");
  const auto mean = token_mean(layer, positions, static_cast<double>(n));
  double total = 0.0;
  for (auto t : positions) {
    auto row = layer.row(t);
    for (std::size_t j = 0; j < mean.size(); ++j) total += (row[j] - mean[j]) * (row[j] - mean[j]);
  }
  return total / (static_cast<double>(n) * static_cast<double>(layer.cols()));
}

std::vector<double> variance_trace(const ActivationTrace& trace, PositionMode mode) {
  const auto positions = select_positions(trace, mode);
  std::vector<double> out;
  out.reserve(trace.layers.size());
  for (const auto& h : trace.layers) out.push_back(layer_variance(h, positions));
  return out;
}

double DiagnosticReport::mean_delta_var() const {
  if (delta_var.empty()) return 0.0;
  double total = 0.0;
  for (double v : delta_var) total += v;
  return total / static_cast<double>(delta_var.size());
}

double DiagnosticReport::ms_slope() const {
  const auto n = static_cast<double>(layers.size());
  if (layers.size() < 2) return 0.0;
  double mx = 0.0, my = 0.0;
  for (const auto& l : layers) {
    mx += static_cast<double>(l.layer);
    my += l.ms;
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (const auto& l : layers) {
    const double dx = static_cast<double>(l.layer) - mx;
    sxy += dx * (l.ms - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

DiagnosticReport diagnose(const ActivationTrace& trace, PositionMode mode, ReportMetadata metadata) {
  return diagnose_all(std::span<const ActivationTrace>(&trace, 1), mode, std::move(metadata));
}

DiagnosticReport diagnose_all(std::span<const ActivationTrace> traces, PositionMode mode,
                              ReportMetadata metadata) {
  if (traces.empty()) throw DomainError("diagnose: no traces");
  const std::size_t layer_count = traces.front().layers.size();
  DiagnosticReport report;
  metadata.positions = mode;
  report.metadata = std::move(metadata);
  report.traces = traces.size();
  report.layers.resize(layer_count);
  std::vector<bool> degenerate(layer_count, false);
  for (const auto& trace : traces) {
    if (trace.layers.size() != layer_count) throw DomainError("diagnose: traces differ in depth");
    const auto positions = select_positions(trace, mode);
    for (std::size_t l = 0; l < layer_count; ++l) {
      auto& entry = report.layers[l];
      entry.layer = l;
      entry.ms += mean_token_std(trace.layers[l], positions);
      const auto cos = centered_pair_cosine(trace.layers[l], positions);
      entry.centered_cos += cos.value;
      if (cos.degenerate) degenerate[l] = true;
      entry.var += layer_variance(trace.layers[l], positions);
    }
  }
  const auto n = static_cast<double>(traces.size());
  for (std::size_t l = 0; l < layer_count; ++l) {
    auto& entry = report.layers[l];
    entry.ms /= n;
    entry.centered_cos /= n;
    entry.var /= n;
    entry.degenerate = degenerate[l];
    if (degenerate[l]) report.degenerate_layers.push_back(l);
  }
  for (std::size_t l = 0; l + 1 < layer_count; ++l) {
    report.delta_var.push_back(report.layers[l + 1].var - report.layers[l].var);
  }
  return report;
}

std::string report_csv(const DiagnosticReport& report) {
  std::ostringstream os;
  const auto& m = report.metadata;
  os << "# model_id=" << m.model_id << " objective=" << m.objective << " seed=" << m.seed
     << " positions=" << to_string(m.positions) << " traces=" << report.traces;
  if (report.sigma_sq_targets) os << " sigma_sq_targets=" << format_double(*report.sigma_sq_targets);
  os << " mean_delta_var=" << format_double(report.mean_delta_var());
  if (!m.extra.empty()) os << ' ' << m.extra;
  os << " config=" << m.config << '\n';
  os << "layer,ms,centered_cos,var,delta_var,degenerate\n";
  for (std::size_t l = 0; l < report.layers.size(); ++l) {
    const auto& e = report.layers[l];
    os << e.layer << ',' << format_double(e.ms) << ',' << format_double(e.centered_cos) << ','
       << format_double(e.var) << ',';
    if (l < report.delta_var.size()) os << format_double(report.delta_var[l]);
    os << ',' << (e.degenerate ? 1 : 0) << '\n';
  }
  return os.str();
}

void write_report_csv(const std::filesystem::path& path, const DiagnosticReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << report_csv(report);
}

std::vector<double> init_variance_profile(const ModelConfig& config, std::uint64_t seed) {
  const auto params = build<double>(config, seed);
  Rng rng(derive_seed(seed, kInputStream));
  const auto tokens = gaussian<double>(config.seq_len, config.patch_dim, 1.0, rng);
  const auto result = forward(params, config, tokens, nullptr, HeadKind::classify, true);
  return variance_trace(*result.trace, PositionMode::non_special);
}

namespace {

Lemma2Report run_profiles(const ModelConfig& config, std::span<const std::uint64_t> seeds,
                          bool expect_decrease) {
  if (seeds.empty()) throw DomainError("verifier needs at least one seed");
  Lemma2Report report;
  std::size_t passes = 0;
  for (auto seed : seeds) {
    auto var = init_variance_profile(config, seed);
    bool ok = true;
    for (std::size_t l = 0; l + 1 < var.size(); ++l) {
      if (expect_decrease) {
        ok = ok && var[l + 1] < var[l] - kStrictSlack;
      } else {
        ok = ok && var[l + 1] >= var[l] - kStrictSlack;
      }
    }
    report.seeds.push_back(seed);
    report.variances.push_back(std::move(var));
    report.passed.push_back(ok);
    if (ok) ++passes;
  }
  report.pass_fraction = static_cast<double>(passes) / static_cast<double>(seeds.size());
  return report;
}

}  // namespace

Lemma2Report verify_lemma2(const ModelConfig& config, std::span<const std::uint64_t> seeds) {
  if (config.residual) {
    throw ConfigError("verify_lemma2 requires a residual-free model (residual = false)");
  }
  return run_profiles(config, seeds, true);
}

Lemma2Report check_residual_growth(const ModelConfig& config,
                                   std::span<const std::uint64_t> seeds) {
  if (!config.residual) throw ConfigError("check_residual_growth requires residual = true");
  return run_profiles(config, seeds, false);
}

std::string to_string(VerifyStatus status) {
  switch (status) {
    case VerifyStatus::pass:
      return "pass";
    case VerifyStatus::fail:
      return "fail";
    case VerifyStatus::inconclusive:
      return "inconclusive";
    case VerifyStatus::precondition_unmet:
      return "precondition_unmet";
  }
  return "?";
}

int exit_code(VerifyStatus status) {
  switch (status) {
    case VerifyStatus::pass:
      return 0;
    case VerifyStatus::fail:
      return 1;
    case VerifyStatus::inconclusive:
      return 2;
    case VerifyStatus::precondition_unmet:
      return 3;
  }
  return 1;
}

Lemma1Report assess_lemma1(std::span<const Matrix<double>> predictions,
                           std::span<const Matrix<double>> targets, double tolerance,
                           double convergence_factor) {
  if (predictions.size() != targets.size() || predictions.empty()) {
    throw DomainError("assess_lemma1: need matching, non-empty prediction/target lists");
  }
  Lemma1Report report;
  report.tolerance = tolerance;
  report.convergence_factor = convergence_factor;
  double loss = 0.0, sigma = 0.0, var = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& p = predictions[i];
    const auto& y = targets[i];
    require_same_shape(p, y, "assess_lemma1");
    if (p.rows() == 0) throw DomainError("empty mask");
    double sq = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) sq += (p[k] - y[k]) * (p[k] - y[k]);
    loss += sq / static_cast<double>(p.size());
    std::vector<std::size_t> rows(p.rows());
    for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = r;
    sigma += layer_variance(y, rows);
    var += layer_variance(p, rows);
  }
  const auto n = static_cast<double>(predictions.size());
  report.loss = loss / n;
  report.sigma_sq = sigma / n;
  report.var_pred = var / n;
  report.converged = report.loss < convergence_factor * report.sigma_sq;
  if (!report.converged) {
    report.status = VerifyStatus::precondition_unmet;
  } else {
    report.status = report.var_pred >= (1.0 - tolerance) * report.sigma_sq ? VerifyStatus::pass
                                                                           : VerifyStatus::fail;
  }
  return report;
}

template <typename T>
Lemma1Report verify_lemma1(const Parameters<T>& params, const ModelConfig& model,
                           const TrainConfig& mae_config, const Dataset& data, double tolerance,
                           double convergence_factor, std::uint64_t mask_seed) {
  if (mae_config.mae_target != MaeTarget::continuous) {
    throw ConfigError("verify_lemma1 needs a continuous reconstruction target");
  }
  Rng rng(mask_seed);
  std::vector<Matrix<double>> preds, targets;
  for (const auto& s : data.samples) {
    const MaskPlan mask = sample_mask(model.seq_len, mae_config.mask_ratio, rng);
    const auto out = forward(params, model, s.tokens.template cast<T>(), &mask,
                             HeadKind::reconstruct, false);
    preds.push_back(out.output.template cast<double>());
    targets.push_back(mae_targets(s.tokens, mask, mae_config.per_patch_norm));
  }
  return assess_lemma1(preds, targets, tolerance, convergence_factor);
}

template <typename T>
std::vector<ActivationTrace> collect_traces(const Parameters<T>& params, const ModelConfig& config,
                                            const Dataset& data, std::optional<double> mask_ratio,
                                            std::uint64_t mask_seed) {
  Rng rng(mask_seed);
  std::vector<ActivationTrace> traces;
  traces.reserve(data.size());
  for (const auto& s : data.samples) {
    const auto tokens = s.tokens.template cast<T>();
    if (mask_ratio) {
      const MaskPlan mask = sample_mask(config.seq_len, *mask_ratio, rng);
      traces.push_back(*forward(params, config, tokens, &mask, HeadKind::reconstruct, true).trace);
    } else {
      traces.push_back(*forward(params, config, tokens, nullptr, HeadKind::classify, true).trace);
    }
  }
  return traces;
}

template <typename T>
TheoremReport compare_residual_delta(const TracedModel<T>& mae, const TracedModel<T>& classifier,
                                     const ModelConfig& mae_config,
                                     const ModelConfig& classifier_config, const Dataset& data,
                                     std::uint64_t mask_seed, PositionMode mode) {
  if (!(mae_config == classifier_config)) {
    throw ConfigError("compare_residual_delta: the two models must share one ModelConfig");
  }
  if (!mae_config.residual) throw ConfigError("compare_residual_delta: residuals must be enabled");
  if (!mae.params || !classifier.params) throw DomainError("compare_residual_delta: missing model");

  auto side = [&](const TracedModel<T>& m, const std::string& id) {
    const auto traces = collect_traces(*m.params, mae_config, data, m.mask_ratio, mask_seed);
    ReportMetadata meta;
    meta.model_id = id;
    meta.objective = m.objective;
    meta.seed = mask_seed;
    return diagnose_all(traces, mode, meta);
  };
  TheoremReport report;
  report.mae = side(mae, "mae");
  report.classifier = side(classifier, "classifier");
  report.mae_mean_delta = report.mae.mean_delta_var();
  report.classifier_mean_delta = report.classifier.mean_delta_var();
  if (report.mae_mean_delta == report.classifier_mean_delta) {
    report.status = VerifyStatus::inconclusive;
  } else {
    report.status = report.mae_mean_delta > report.classifier_mean_delta ? VerifyStatus::pass
                                                                         : VerifyStatus::fail;
  }
  return report;
}

#define BAMBOO_INSTANTIATE(T)                                                                  \
  template Lemma1Report verify_lemma1(const Parameters<T>&, const ModelConfig&,                \
                                      const TrainConfig&, const Dataset&, double, double,      \
                                      std::uint64_t);                                          \
  template std::vector<ActivationTrace> collect_traces(const Parameters<T>&,                   \
                                                       const ModelConfig&, const Dataset&,     \
                                                       std::optional<double>, std::uint64_t);  \
  template TheoremReport compare_residual_delta(const TracedModel<T>&, const TracedModel<T>&,  \
                                                const ModelConfig&, const ModelConfig&,        \
                                                const Dataset&, std::uint64_t, PositionMode);

BAMBOO_INSTANTIATE(float)
BAMBOO_INSTANTIATE(double)

#undef BAMBOO_INSTANTIATE

}  // namespace bamboo

#include "bamboo/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace bamboo {

using nlohmann::json;

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds are read as size_t");

namespace {

bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Reads one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return node_.contains(key); }

  const json& child(const std::string& key) {
    seen_.insert(key);
    return node_.at(key);
  }

  std::string where(const std::string& key) const { return path_ + "." + key; }

  void read(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const auto& v = child(key);
    if (!is_count(v)) throw ConfigError(where(key) + ": expected a non-negative integer");
    out = v.get<std::size_t>();
  }

  void read(const std::string& key, double& out) {
    if (!has(key)) return;
    const auto& v = child(key);
    if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
    out = v.get<double>();
  }

  void read(const std::string& key, bool& out) {
    if (!has(key)) return;
    const auto& v = child(key);
    if (!v.is_boolean()) throw ConfigError(where(key) + ": expected true or false");
    out = v.get<bool>();
  }

  void read(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const auto& v = child(key);
    if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
    out = v.get<std::string>();
  }

  template <typename E, typename Parse>
  void read_enum(const std::string& key, E& out, Parse parse) {
    if (!has(key)) return;
    std::string name;
    read(key, name);
    try {
      out = parse(name);
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <typename U>
  void read_list(const std::string& key, std::vector<U>& out) {
    if (!has(key)) return;
    const auto& v = child(key);
    if (!v.is_array()) throw ConfigError(where(key) + ": expected a list");
    out.clear();
    for (const auto& item : v) {
      if (!is_count(item)) {
        throw ConfigError(where(key) + ": expected non-negative integers");
      }
      out.push_back(item.get<U>());
    }
  }

  void finish() const {
    for (const auto& item : node_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(where(item.key()) + ": unknown key");
    }
  }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

ModelConfig parse_model(const json& node, std::set<std::string>& given) {
  Section s(node, "model");
  ModelConfig m;
  for (const char* key : {"seq_len", "patch_dim", "num_classes"}) {
    if (s.has(key)) given.insert(key);
  }
  s.read("depth", m.depth);
  s.read("width", m.width);
  s.read("heads", m.heads);
  s.read("seq_len", m.seq_len);
  s.read("patch_dim", m.patch_dim);
  s.read("num_classes", m.num_classes);
  s.read("ffn_mult", m.ffn_mult);
  s.read_enum("norm", m.norm, parse_norm_placement);
  s.read("residual", m.residual);
  s.read_enum("activation", m.activation, parse_activation);
  s.read_enum("head_mode", m.head_mode, parse_head_mode);
  s.read("use_cls_token", m.use_cls_token);
  s.read("final_norm", m.final_norm);
  s.read("norm_eps", m.norm_eps);
  s.finish();
  return m;
}

TrainConfig parse_train(const json& node, const std::string& path) {
  Section s(node, path);
  TrainConfig t;
  s.read_enum("objective", t.objective, parse_objective);
  if (t.objective == Objective::mae) t.mask_ratio = kContinuousMaskRatio;
  s.read_enum("mae_target", t.mae_target, parse_mae_target);
  if (t.mae_target == MaeTarget::discrete) t.mask_ratio = kDiscreteMaskRatio;
  s.read("epochs", t.epochs);
  s.read("batch_size", t.batch_size);
  s.read("learning_rate", t.learning_rate);
  s.read("beta1", t.beta1);
  s.read("beta2", t.beta2);
  s.read("adam_eps", t.adam_eps);
  s.read("weight_decay", t.weight_decay);
  s.read("mask_ratio", t.mask_ratio);
  s.read("per_patch_norm", t.per_patch_norm);
  s.finish();
  return t;
}

json train_json(const TrainConfig& t) {
  return json{{"objective", to_string(t.objective)},
              {"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"learning_rate", t.learning_rate},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"adam_eps", t.adam_eps},
              {"weight_decay", t.weight_decay},
              {"mask_ratio", t.mask_ratio},
              {"mae_target", to_string(t.mae_target)},
              {"per_patch_norm", t.per_patch_norm}};
}

json model_json(const ModelConfig& m) {
  return json{{"depth", m.depth},
              {"width", m.width},
              {"heads", m.heads},
              {"seq_len", m.seq_len},
              {"patch_dim", m.patch_dim},
              {"num_classes", m.num_classes},
              {"ffn_mult", m.ffn_mult},
              {"norm", to_string(m.norm)},
              {"residual", m.residual},
              {"activation", to_string(m.activation)},
              {"head_mode", to_string(m.head_mode)},
              {"use_cls_token", m.use_cls_token},
              {"final_norm", m.final_norm},
              {"norm_eps", m.norm_eps}};
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text,
                std::vector<std::filesystem::path>& files) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("write failed for " + path.string());
  files.push_back(path);
}

std::filesystem::path prepare_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw Error("output directory " + dir.string() + " is not writable");
  }
  return dir;
}

std::string seed_dir_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

std::string loss_csv(const ExperimentSpec& spec, std::uint64_t seed,
                     const std::vector<LossCurveRow>& rows) {
  std::ostringstream os;
  os << "# seed=" << seed << " spec=" << resolved_spec(spec) << '\n';
  os << "stage,epoch,mean_loss,accuracy\n";
  for (const auto& row : rows) {
    os << row.stage << ',' << row.record.epoch << ',' << fmt(row.record.mean_loss) << ',';
    if (row.record.accuracy) os << fmt(*row.record.accuracy);
    os << '\n';
  }
  return os.str();
}

void append_curve(std::vector<LossCurveRow>& rows, const std::string& stage,
                  const std::vector<EpochRecord>& history) {
  auto more = loss_curve(stage, history);
  rows.insert(rows.end(), more.begin(), more.end());
}

Dataset head_of(const Dataset& data, std::size_t n) {
  Dataset out{data.spec, data.prototypes, {}};
  const std::size_t k = std::min(n, data.size());
  out.samples.assign(data.samples.begin(), data.samples.begin() + static_cast<std::ptrdiff_t>(k));
  return out;
}

struct Splits {
  Dataset train;
  Dataset test;
  Dataset eval;
};

Splits make_splits(const ExperimentSpec& spec) {
  auto all = generate(spec.data.spec, spec.data.samples);
  auto [train, test] = train_test_split(all);
  if (train.size() == 0 || test.size() == 0) {
    throw ConfigError("data.samples too small for an 80/20 split");
  }
  Dataset eval = head_of(test, spec.diagnostics.eval_samples);
  return {std::move(train), std::move(test), std::move(eval)};
}

// Restricts a report to the requested layers (all when empty).
DiagnosticReport select_layers(DiagnosticReport report, const std::vector<std::size_t>& layers) {
  if (layers.empty()) return report;
  DiagnosticReport out = report;
  out.layers.clear();
  out.delta_var.clear();
  out.degenerate_layers.clear();
  for (auto l : layers) {
    if (l >= report.layers.size()) continue;
    out.layers.push_back(report.layers[l]);
    if (report.layers[l].degenerate) out.degenerate_layers.push_back(l);
  }
  for (std::size_t i = 0; i + 1 < out.layers.size(); ++i) {
    out.delta_var.push_back(out.layers[i + 1].var - out.layers[i].var);
  }
  return out;
}

template <typename T>
DiagnosticReport trace_report(const ExperimentSpec& spec, const Parameters<T>& params,
                              const ModelConfig& model, const Dataset& eval,
                              std::optional<double> mask_ratio, const std::string& id,
                              const std::string& objective, std::uint64_t seed) {
  const auto traces = collect_traces(params, model, eval, mask_ratio, spec.diagnostics.mask_seed);
  ReportMetadata meta;
  meta.model_id = id;
  meta.objective = objective;
  meta.seed = seed;
  meta.config = resolved_spec(spec);
  auto report = diagnose_all(traces, spec.diagnostics.positions, meta);
  return select_layers(std::move(report), spec.diagnostics.layers);
}

std::vector<double> column(const DiagnosticReport& r, double LayerDiagnostics::*field) {
  std::vector<double> out;
  for (const auto& l : r.layers) out.push_back(l.*field);
  return out;
}

void write_plots(const std::filesystem::path& dir, const std::vector<const DiagnosticReport*>& reports,
                 std::vector<std::filesystem::path>& files) {
  std::vector<SeriesPlot> ms, cos;
  for (const auto* r : reports) {
    ms.push_back({r->metadata.model_id, column(*r, &LayerDiagnostics::ms)});
    cos.push_back({r->metadata.model_id, column(*r, &LayerDiagnostics::centered_cos)});
  }
  write_text(dir / "ms.svg", line_plot_svg("mean token std by layer", "ms", ms), files);
  write_text(dir / "cos.svg", line_plot_svg("centered pair cosine by layer", "cos", cos), files);
}

std::optional<double> trace_mask(const ExperimentSpec& spec, const TrainConfig& config) {
  if (config.objective == Objective::mae && spec.diagnostics.mask_mae_inputs) {
    return config.mask_ratio;
  }
  return std::nullopt;
}

TrainConfig seeded(TrainConfig config, std::uint64_t seed) {
  config.seed = seed;
  return config;
}

std::string summary_line(std::initializer_list<std::string> cells) {
  std::string line;
  for (const auto& c : cells) {
    if (!line.empty()) line += ',';
    line += c;
  }
  return line + '\n';
}

// ---- run ----

template <typename T>
RunOutcome run_train(const ExperimentSpec& spec, const Splits& data, std::ostream& log) {
  RunOutcome outcome;
  const auto root = prepare_dir(spec.outputs.directory);
  std::string summary = "# spec=" + resolved_spec(spec) + "\n" +
                        "seed,objective,final_loss,test_accuracy,mean_delta_var,ms_slope,"
                        "final_centered_cos,diverged\n";
  std::vector<ActivationTrace> pooled;
  for (auto seed : spec.repeat_seeds) {
    log << "[" << spec.name << "] seed " << seed << '\n';
    const auto dir = prepare_dir(root / seed_dir_name(seed));
    std::vector<LossCurveRow> curve;
    TrainState<T> state;
    TrainConfig last = seeded(spec.train, seed);
    if (spec.pretrain) {
      auto two = pretrain_then_finetune<T>(spec.model, seeded(*spec.pretrain, seed), last,
                                           data.train, data.train);
      append_curve(curve, "pretrain", two.pretrain.history);
      append_curve(curve, "finetune", two.finetune.history);
      state = two.pretrain.diverged ? std::move(two.pretrain) : std::move(two.finetune);
      if (two.pretrain.diverged) last = seeded(*spec.pretrain, seed);
    } else {
      state = train<T>(spec.model, last, data.train);
      append_curve(curve, "train", state.history);
    }
    write_text(dir / "loss.csv", loss_csv(spec, seed, curve), outcome.files);
    if (state.diverged) {
      outcome.exit_code = 1;
      outcome.message = "seed " + std::to_string(seed) + " diverged: " + state.failure;
      log << outcome.message << '\n';
      return outcome;
    }
    const auto traces = collect_traces(state.params, spec.model, data.eval,
                                       trace_mask(spec, last), spec.diagnostics.mask_seed);
    pooled.insert(pooled.end(), traces.begin(), traces.end());
    ReportMetadata meta{to_string(last.objective), to_string(last.objective), resolved_spec(spec),
                        seed, spec.diagnostics.positions, {}};
    const auto report =
        select_layers(diagnose_all(traces, spec.diagnostics.positions, meta), spec.diagnostics.layers);
    write_text(dir / "diagnostics.csv", report_csv(report), outcome.files);
    if (spec.outputs.svg) write_plots(dir, {&report}, outcome.files);
    std::string accuracy;
    if (last.objective == Objective::classifier) {
      accuracy = fmt(evaluate_accuracy(state.params, spec.model, data.test));
    }
    const double final_loss = state.history.empty() ? 0.0 : state.history.back().mean_loss;
    summary += summary_line({std::to_string(seed), to_string(last.objective), fmt(final_loss),
                             accuracy, fmt(report.mean_delta_var()), fmt(report.ms_slope()),
                             fmt(report.final_centered_cos()), "0"});
  }
  ReportMetadata meta{"aggregate", to_string(spec.train.objective), resolved_spec(spec), 0,
                      spec.diagnostics.positions, "seeds=" + std::to_string(spec.repeat_seeds.size())};
  const auto aggregate =
      select_layers(diagnose_all(pooled, spec.diagnostics.positions, meta), spec.diagnostics.layers);
  write_text(root / "aggregate_diagnostics.csv", report_csv(aggregate), outcome.files);
  write_text(root / "summary.csv", summary, outcome.files);
  return outcome;
}

template <typename T>
RunOutcome run_pair(const ExperimentSpec& spec, const Splits& data, std::ostream& log) {
  RunOutcome outcome;
  const auto root = prepare_dir(spec.outputs.directory);
  std::string summary = "# spec=" + resolved_spec(spec) + "\n" +
                        "seed,model,objective,final_loss,test_accuracy,mean_delta_var,ms_slope,"
                        "final_centered_cos\n";
  std::vector<ActivationTrace> pooled_first, pooled_second;
  const TrainConfig& second = *spec.pretrain;
  for (auto seed : spec.repeat_seeds) {
    log << "[" << spec.name << "] seed " << seed << '\n';
    const auto dir = prepare_dir(root / seed_dir_name(seed));
    const auto cls_cfg = seeded(spec.train, seed);
    const auto mae_cfg = seeded(second, seed);
    auto a = train<T>(spec.model, cls_cfg, data.train);
    auto b = train<T>(spec.model, mae_cfg, data.train);
    std::vector<LossCurveRow> curve;
    append_curve(curve, "classifier", a.history);
    append_curve(curve, "mae", b.history);
    write_text(dir / "loss.csv", loss_csv(spec, seed, curve), outcome.files);
    if (a.diverged || b.diverged) {
      outcome.exit_code = 1;
      outcome.message = "seed " + std::to_string(seed) + " diverged: " +
                        (a.diverged ? a.failure : b.failure);
      log << outcome.message << '\n';
      return outcome;
    }
    const auto ta = collect_traces(a.params, spec.model, data.eval, trace_mask(spec, cls_cfg),
                                   spec.diagnostics.mask_seed);
    const auto tb = collect_traces(b.params, spec.model, data.eval, trace_mask(spec, mae_cfg),
                                   spec.diagnostics.mask_seed);
    pooled_first.insert(pooled_first.end(), ta.begin(), ta.end());
    pooled_second.insert(pooled_second.end(), tb.begin(), tb.end());
    auto report = [&](const std::vector<ActivationTrace>& t, const std::string& id,
                      const TrainConfig& c, std::uint64_t s) {
      ReportMetadata meta{id, to_string(c.objective), resolved_spec(spec), s,
                          spec.diagnostics.positions, {}};
      return select_layers(diagnose_all(t, spec.diagnostics.positions, meta), spec.diagnostics.layers);
    };
    const auto ra = report(ta, "classifier", cls_cfg, seed);
    const auto rb = report(tb, "mae", mae_cfg, seed);
    write_text(dir / "diagnostics_classifier.csv", report_csv(ra), outcome.files);
    write_text(dir / "diagnostics_mae.csv", report_csv(rb), outcome.files);
    if (spec.outputs.svg) write_plots(dir, {&ra, &rb}, outcome.files);
    for (const auto* side : {&ra, &rb}) {
      const auto& st = side == &ra ? a : b;
      const auto& cfg = side == &ra ? cls_cfg : mae_cfg;
      std::string accuracy;
      if (cfg.objective == Objective::classifier) {
        accuracy = fmt(evaluate_accuracy(st.params, spec.model, data.test));
      }
      const double final_loss = st.history.empty() ? 0.0 : st.history.back().mean_loss;
      summary += summary_line({std::to_string(seed), side->metadata.model_id,
                               to_string(cfg.objective), fmt(final_loss), accuracy,
                               fmt(side->mean_delta_var()), fmt(side->ms_slope()),
                               fmt(side->final_centered_cos())});
    }
  }
  ReportMetadata meta{"classifier", to_string(spec.train.objective), resolved_spec(spec), 0,
                      spec.diagnostics.positions, "aggregate=1"};
  const auto agg_a = select_layers(diagnose_all(pooled_first, spec.diagnostics.positions, meta),
                                   spec.diagnostics.layers);
  meta.model_id = "mae";
  meta.objective = to_string(second.objective);
  const auto agg_b = select_layers(diagnose_all(pooled_second, spec.diagnostics.positions, meta),
                                   spec.diagnostics.layers);
  write_text(root / "aggregate_diagnostics_classifier.csv", report_csv(agg_a), outcome.files);
  write_text(root / "aggregate_diagnostics_mae.csv", report_csv(agg_b), outcome.files);
  if (spec.outputs.svg) write_plots(root, {&agg_a, &agg_b}, outcome.files);
  write_text(root / "summary.csv", summary, outcome.files);
  return outcome;
}

PlanContext sweep_context(const ExperimentSpec& spec) {
  PlanContext ctx;
  ctx.patch_dim = spec.model.patch_dim;
  ctx.num_classes = spec.model.num_classes;
  ctx.seq_len = spec.model.seq_len;
  ctx.head_dim = spec.sweep.head_dim;
  return ctx;
}

template <typename T>
RunOutcome run_sweep(const ExperimentSpec& spec, const Splits& data, std::ostream& log) {
  RunOutcome outcome;
  const auto root = prepare_dir(spec.outputs.directory);
  const ReferenceScale ref{"sweep", spec.sweep.reference_depth, spec.sweep.reference_width};
  const std::string header = "seed,depth,width,heads,cost_ratio,scratch_accuracy,mae_finetuned_accuracy\n";
  std::map<std::size_t, std::pair<double, double>> totals;
  std::map<std::size_t, PlannedConfig> plans;
  for (auto depth : spec.sweep.depths) {
    plans[depth] = plan_widths(depth, ref, spec.sweep.band, sweep_context(spec)).front();
  }
  std::string all_rows;
  for (auto seed : spec.repeat_seeds) {
    const auto dir = prepare_dir(root / seed_dir_name(seed));
    std::string rows;
    std::vector<LossCurveRow> curve;
    for (auto depth : spec.sweep.depths) {
      const auto& plan = plans.at(depth);
      const auto model = planned_model(spec.model, plan);
      log << "[" << spec.name << "] seed " << seed << " depth " << depth << " width "
          << plan.width << '\n';
      const auto scratch = train<T>(model, seeded(spec.train, seed), data.train);
      auto two = pretrain_then_finetune<T>(model, seeded(*spec.pretrain, seed),
                                           seeded(spec.train, seed), data.train, data.train);
      const std::string tag = "L" + std::to_string(depth);
      append_curve(curve, tag + "_scratch", scratch.history);
      append_curve(curve, tag + "_pretrain", two.pretrain.history);
      append_curve(curve, tag + "_finetune", two.finetune.history);
      if (scratch.diverged || two.finetune.diverged) {
        write_text(dir / "loss.csv", loss_csv(spec, seed, curve), outcome.files);
        outcome.exit_code = 1;
        outcome.message = "seed " + std::to_string(seed) + " depth " + std::to_string(depth) +
                          " diverged: " + (scratch.diverged ? scratch.failure : two.finetune.failure);
        log << outcome.message << '\n';
        return outcome;
      }
      const double acc_scratch = evaluate_accuracy(scratch.params, model, data.test);
      const double acc_mae = evaluate_accuracy(two.finetune.params, model, data.test);
      totals[depth].first += acc_scratch;
      totals[depth].second += acc_mae;
      const auto line = summary_line({std::to_string(seed), std::to_string(depth),
                                      std::to_string(plan.width), std::to_string(plan.heads),
                                      fmt(plan.cost_ratio), fmt(acc_scratch), fmt(acc_mae)});
      rows += line;
      all_rows += line;
    }
    write_text(dir / "loss.csv", loss_csv(spec, seed, curve), outcome.files);
    write_text(dir / "accuracy_vs_depth.csv",
               "# seed=" + std::to_string(seed) + " spec=" + resolved_spec(spec) + "\n" + header + rows,
               outcome.files);
  }
  std::string agg = "# spec=" + resolved_spec(spec) + "\n" +
                    "depth,width,heads,cost_ratio,mean_scratch_accuracy,mean_mae_finetuned_accuracy\n";
  const auto n = static_cast<double>(spec.repeat_seeds.size());
  for (auto depth : spec.sweep.depths) {
    const auto& plan = plans.at(depth);
    agg += summary_line({std::to_string(depth), std::to_string(plan.width),
                         std::to_string(plan.heads), fmt(plan.cost_ratio),
                         fmt(totals[depth].first / n), fmt(totals[depth].second / n)});
  }
  write_text(root / "accuracy_vs_depth_all.csv",
             "# spec=" + resolved_spec(spec) + "\n" + header + all_rows, outcome.files);
  write_text(root / "accuracy_vs_depth_mean.csv", agg, outcome.files);
  return outcome;
}

template <typename T>
RunOutcome run_typed(const ExperimentSpec& spec, std::ostream& log) {
  const auto data = make_splits(spec);
  RunOutcome outcome;
  switch (spec.kind) {
    case ExperimentKind::train:
      outcome = run_train<T>(spec, data, log);
      break;
    case ExperimentKind::objective_pair:
      outcome = run_pair<T>(spec, data, log);
      break;
    case ExperimentKind::depth_sweep:
      outcome = run_sweep<T>(spec, data, log);
      break;
  }
  return outcome;
}

// ---- verify ----

json variances_json(const Lemma2Report& r) {
  json seeds = json::array();
  for (std::size_t i = 0; i < r.seeds.size(); ++i) {
    seeds.push_back({{"seed", r.seeds[i]}, {"passed", static_cast<bool>(r.passed[i])},
                     {"variance", r.variances[i]}});
  }
  return json{{"pass_fraction", r.pass_fraction}, {"seeds", seeds}};
}

VerifyOutcome finish_verify(const ExperimentSpec& spec, VerifyTarget target, VerifyStatus status,
                            json body, const std::string& summary) {
  const auto root = prepare_dir(spec.outputs.directory);
  body["target"] = to_string(target);
  body["status"] = to_string(status);
  body["exit_code"] = exit_code(status);
  body["spec"] = to_json(spec);
  VerifyOutcome out;
  out.status = status;
  out.report = root / ("verify_" + to_string(target) + ".json");
  out.summary = summary;
  std::vector<std::filesystem::path> files;
  write_text(out.report, body.dump(2) + "\n", files);
  return out;
}

VerifyOutcome verify_lemma2_flow(const ExperimentSpec& spec, std::ostream& log) {
  const auto& seeds = spec.verify.seeds.empty() ? spec.repeat_seeds : spec.verify.seeds;
  const auto plain = verify_lemma2(spec.model, seeds);
  json body;
  body["threshold"] = spec.verify.pass_fraction;
  body["strict_slack"] = kStrictSlack;
  body["residual_free"] = variances_json(plain);
  bool ok = plain.pass_fraction >= spec.verify.pass_fraction;
  std::ostringstream summary;
  summary << "residual-free decreasing fraction " << plain.pass_fraction;
  if (spec.verify.check_residual) {
    ModelConfig with = spec.model;
    with.residual = true;
    const auto growth = check_residual_growth(with, seeds);
    body["residual"] = variances_json(growth);
    ok = ok && growth.pass_fraction >= spec.verify.pass_fraction;
    summary << ", residual non-decreasing fraction " << growth.pass_fraction;
  }
  summary << " (threshold " << spec.verify.pass_fraction << ")";
  log << summary.str() << '\n';
  return finish_verify(spec, VerifyTarget::lemma2, ok ? VerifyStatus::pass : VerifyStatus::fail,
                       std::move(body), summary.str());
}

template <typename T>
VerifyOutcome verify_lemma1_flow(const ExperimentSpec& spec, std::ostream& log) {
  if (spec.train.objective != Objective::mae) {
    throw ConfigError("verify lemma1 needs train.objective = mae");
  }
  const auto data = make_splits(spec);
  json seeds = json::array();
  bool any_unmet = false, all_pass = true;
  std::ostringstream summary;
  for (auto seed : spec.repeat_seeds) {
    const auto cfg = seeded(spec.train, seed);
    const auto state = train<T>(spec.model, cfg, data.train);
    if (state.diverged) throw NonFiniteError("training diverged: " + state.failure);
    const auto r = verify_lemma1(state.params, spec.model, cfg, data.test, spec.verify.tolerance,
                                 spec.verify.convergence_factor, spec.diagnostics.mask_seed);
    any_unmet = any_unmet || r.status == VerifyStatus::precondition_unmet;
    all_pass = all_pass && r.status == VerifyStatus::pass;
    seeds.push_back({{"seed", seed},
                     {"loss", r.loss},
                     {"sigma_sq", r.sigma_sq},
                     {"var_pred", r.var_pred},
                     {"loss_threshold", r.convergence_factor * r.sigma_sq},
                     {"var_threshold", (1.0 - r.tolerance) * r.sigma_sq},
                     {"converged", r.converged},
                     {"status", to_string(r.status)}});
    summary << "seed " << seed << ": loss " << r.loss << " sigma^2 " << r.sigma_sq << " var "
            << r.var_pred << " -> " << (r.converged ? to_string(r.status) : "not converged")
            << "; ";
    log << "[lemma1] seed " << seed << " loss " << r.loss << " sigma^2 " << r.sigma_sq
        << " var_pred " << r.var_pred << '\n';
  }
  const auto status = any_unmet ? VerifyStatus::precondition_unmet
                                : (all_pass ? VerifyStatus::pass : VerifyStatus::fail);
  json body{{"seeds", seeds},
            {"tolerance", spec.verify.tolerance},
            {"convergence_factor", spec.verify.convergence_factor}};
  return finish_verify(spec, VerifyTarget::lemma1, status, std::move(body), summary.str());
}

template <typename T>
VerifyOutcome verify_theorem1_flow(const ExperimentSpec& spec, std::ostream& log) {
  if (!spec.pretrain) throw ConfigError("verify theorem1 needs a pretrain section (MAE side)");
  const auto data = make_splits(spec);
  json seeds = json::array();
  std::size_t passes = 0, ties = 0;
  std::ostringstream summary;
  for (auto seed : spec.repeat_seeds) {
    const auto cls_cfg = seeded(spec.train, seed);
    const auto mae_cfg = seeded(*spec.pretrain, seed);
    const auto a = train<T>(spec.model, cls_cfg, data.train);
    const auto b = train<T>(spec.model, mae_cfg, data.train);
    if (a.diverged || b.diverged) {
      throw NonFiniteError("training diverged: " + (a.diverged ? a.failure : b.failure));
    }
    TracedModel<T> mae{&b.params, to_string(mae_cfg.objective), trace_mask(spec, mae_cfg)};
    TracedModel<T> cls{&a.params, to_string(cls_cfg.objective), trace_mask(spec, cls_cfg)};
    const auto r = compare_residual_delta(mae, cls, spec.model, spec.model, data.eval,
                                          spec.diagnostics.mask_seed, spec.diagnostics.positions);
    const bool delta_ok = r.status == VerifyStatus::pass;
    const bool cos_ok = r.mae.final_centered_cos() < r.classifier.final_centered_cos();
    const bool slope_ok = r.mae.ms_slope() > r.classifier.ms_slope();
    const bool tie = r.status == VerifyStatus::inconclusive;
    const bool ok = delta_ok && cos_ok && slope_ok;
    if (ok) ++passes;
    if (tie) ++ties;
    seeds.push_back({{"seed", seed},
                     {"mae_mean_delta_var", r.mae_mean_delta},
                     {"classifier_mean_delta_var", r.classifier_mean_delta},
                     {"mae_final_centered_cos", r.mae.final_centered_cos()},
                     {"classifier_final_centered_cos", r.classifier.final_centered_cos()},
                     {"mae_ms_slope", r.mae.ms_slope()},
                     {"classifier_ms_slope", r.classifier.ms_slope()},
                     {"delta_check", tie ? "tie" : (delta_ok ? "pass" : "fail")},
                     {"cos_check", cos_ok},
                     {"slope_check", slope_ok},
                     {"passed", ok}});
    log << "[theorem1] seed " << seed << " dVar mae " << r.mae_mean_delta << " cls "
        << r.classifier_mean_delta << " cos mae " << r.mae.final_centered_cos() << " cls "
        << r.classifier.final_centered_cos() << " slope mae " << r.mae.ms_slope() << " cls "
        << r.classifier.ms_slope() << (tie ? " (tie)" : "") << '\n';
  }
  const std::size_t n = spec.repeat_seeds.size();
  VerifyStatus status = VerifyStatus::fail;
  if (2 * passes > n) {
    status = VerifyStatus::pass;
  } else if (ties > 0) {
    status = VerifyStatus::inconclusive;
  }
  summary << passes << " of " << n << " seeds satisfy all three checks";
  if (ties) summary << ", " << ties << " tied";
  json body{{"seeds", seeds}, {"passing_seeds", passes}, {"required", n / 2 + 1}};
  return finish_verify(spec, VerifyTarget::theorem1, status, std::move(body), summary.str());
}

// ---- svg ----

std::string svg_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

}  // namespace

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + name + "' (expected f32 or f64)");
}

std::string to_string(Precision precision) { return precision == Precision::f64 ? "f64" : "f32"; }

Precision effective_precision(Precision precision) {
  if (const char* env = std::getenv("BAMBOO_PRECISION"); env && *env) {
    return parse_precision(env);
  }
  return precision;
}

ExperimentKind parse_experiment_kind(const std::string& name) {
  if (name == "train") return ExperimentKind::train;
  if (name == "objective_pair") return ExperimentKind::objective_pair;
  if (name == "depth_sweep") return ExperimentKind::depth_sweep;
  throw ConfigError("unknown experiment kind '" + name +
                    "' (expected train, objective_pair or depth_sweep)");
}

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::train:
      return "train";
    case ExperimentKind::objective_pair:
      return "objective_pair";
    case ExperimentKind::depth_sweep:
      return "depth_sweep";
  }
  return "?";
}

VerifyTarget parse_verify_target(const std::string& name) {
  if (name == "lemma1") return VerifyTarget::lemma1;
  if (name == "lemma2") return VerifyTarget::lemma2;
  if (name == "theorem1") return VerifyTarget::theorem1;
  throw ConfigError("unknown verify target '" + name + "' (expected lemma1, lemma2 or theorem1)");
}

std::string to_string(VerifyTarget target) {
  switch (target) {
    case VerifyTarget::lemma1:
      return "lemma1";
    case VerifyTarget::lemma2:
      return "lemma2";
    case VerifyTarget::theorem1:
      return "theorem1";
  }
  return "?";
}

void ExperimentSpec::validate() const {
  model.validate();
  train.validate();
  if (pretrain) pretrain->validate();
  data.spec.validate();
  if (repeat_seeds.empty()) throw ConfigError("repeat_seeds must be non-empty");
  if (data.samples < 5) throw ConfigError("data.samples must be >= 5");
  if (model.seq_len != data.spec.seq_len || model.patch_dim != data.spec.patch_dim ||
      model.num_classes != data.spec.num_classes) {
    throw ConfigError("model seq_len/patch_dim/num_classes must match the data section");
  }
  if (diagnostics.eval_samples < 1) throw ConfigError("diagnostics.eval_samples must be >= 1");
  if (kind == ExperimentKind::objective_pair && !pretrain) {
    throw ConfigError("objective_pair needs a pretrain section for the second model");
  }
  if (kind == ExperimentKind::depth_sweep) {
    if (!pretrain || pretrain->objective != Objective::mae) {
      throw ConfigError("depth_sweep needs a pretrain section with objective mae");
    }
    if (train.objective != Objective::classifier) {
      throw ConfigError("depth_sweep needs train.objective = classifier");
    }
    if (sweep.depths.empty()) throw ConfigError("sweep.depths must be non-empty");
  }
}

ExperimentSpec parse_experiment(const json& doc) {
  Section root(doc, "spec");
  ExperimentSpec spec;
  root.read("name", spec.name);
  root.read_enum("kind", spec.kind, parse_experiment_kind);
  root.read_enum("precision", spec.precision, parse_precision);
  if (root.has("data")) {
    Section s(root.child("data"), "data");
    auto& d = spec.data.spec;
    s.read("seq_len", d.seq_len);
    s.read("patch_dim", d.patch_dim);
    s.read("num_classes", d.num_classes);
    s.read("components", d.components);
    s.read("max_freq", d.max_freq);
    s.read("amplitude", d.amplitude);
    s.read("noise_sigma", d.noise_sigma);
    s.read("seed", d.seed);
    s.read("samples", spec.data.samples);
    s.finish();
  }
  std::set<std::string> given;
  if (root.has("model")) spec.model = parse_model(root.child("model"), given);
  if (!given.count("seq_len")) spec.model.seq_len = spec.data.spec.seq_len;
  if (!given.count("patch_dim")) spec.model.patch_dim = spec.data.spec.patch_dim;
  if (!given.count("num_classes")) spec.model.num_classes = spec.data.spec.num_classes;
  if (root.has("train")) spec.train = parse_train(root.child("train"), "train");
  if (root.has("pretrain")) spec.pretrain = parse_train(root.child("pretrain"), "pretrain");
  if (root.has("diagnostics")) {
    Section s(root.child("diagnostics"), "diagnostics");
    s.read_enum("positions", spec.diagnostics.positions, parse_position_mode);
    s.read_list("layers", spec.diagnostics.layers);
    s.read("eval_samples", spec.diagnostics.eval_samples);
    s.read("mask_mae_inputs", spec.diagnostics.mask_mae_inputs);
    s.read("mask_seed", spec.diagnostics.mask_seed);
    s.finish();
  }
  if (root.has("outputs")) {
    Section s(root.child("outputs"), "outputs");
    std::string dir = spec.outputs.directory.string();
    s.read("directory", dir);
    spec.outputs.directory = dir;
    s.read("svg", spec.outputs.svg);
    s.finish();
  }
  root.read_list("repeat_seeds", spec.repeat_seeds);
  if (root.has("sweep")) {
    Section s(root.child("sweep"), "sweep");
    s.read_list("depths", spec.sweep.depths);
    s.read("reference_depth", spec.sweep.reference_depth);
    s.read("reference_width", spec.sweep.reference_width);
    s.read("head_dim", spec.sweep.head_dim);
    s.read("band_lo", spec.sweep.band.lo);
    s.read("band_hi", spec.sweep.band.hi);
    s.finish();
  }
  if (root.has("verify")) {
    Section s(root.child("verify"), "verify");
    s.read("tolerance", spec.verify.tolerance);
    s.read("convergence_factor", spec.verify.convergence_factor);
    s.read("pass_fraction", spec.verify.pass_fraction);
    s.read("check_residual", spec.verify.check_residual);
    s.read_list("seeds", spec.verify.seeds);
    s.finish();
  }
  root.finish();
  spec.validate();
  return spec;
}

ExperimentSpec load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open spec file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_experiment(doc);
}

json to_json(const ExperimentSpec& spec) {
  const auto& d = spec.data.spec;
  json doc{
      {"name", spec.name},
      {"kind", to_string(spec.kind)},
      {"precision", to_string(spec.precision)},
      {"model", model_json(spec.model)},
      {"train", train_json(spec.train)},
      {"data",
       {{"seq_len", d.seq_len},
        {"patch_dim", d.patch_dim},
        {"num_classes", d.num_classes},
        {"components", d.components},
        {"max_freq", d.max_freq},
        {"amplitude", d.amplitude},
        {"noise_sigma", d.noise_sigma},
        {"seed", d.seed},
        {"samples", spec.data.samples}}},
      {"diagnostics",
       {{"positions", to_string(spec.diagnostics.positions)},
        {"layers", spec.diagnostics.layers},
        {"eval_samples", spec.diagnostics.eval_samples},
        {"mask_mae_inputs", spec.diagnostics.mask_mae_inputs},
        {"mask_seed", spec.diagnostics.mask_seed}}},
      {"outputs", {{"directory", spec.outputs.directory.string()}, {"svg", spec.outputs.svg}}},
      {"repeat_seeds", spec.repeat_seeds},
      {"sweep",
       {{"depths", spec.sweep.depths},
        {"reference_depth", spec.sweep.reference_depth},
        {"reference_width", spec.sweep.reference_width},
        {"head_dim", spec.sweep.head_dim},
        {"band_lo", spec.sweep.band.lo},
        {"band_hi", spec.sweep.band.hi}}},
      {"verify",
       {{"tolerance", spec.verify.tolerance},
        {"convergence_factor", spec.verify.convergence_factor},
        {"pass_fraction", spec.verify.pass_fraction},
        {"check_residual", spec.verify.check_residual},
        {"seeds", spec.verify.seeds}}}};
  if (spec.pretrain) doc["pretrain"] = train_json(*spec.pretrain);
  return doc;
}

std::string resolved_spec(const ExperimentSpec& spec) { return to_json(spec).dump(); }

RunOutcome run_experiment(const ExperimentSpec& spec, std::ostream& log) {
  spec.validate();
  const auto root = prepare_dir(spec.outputs.directory);
  std::vector<std::filesystem::path> files;
  write_text(root / "spec.resolved.json", to_json(spec).dump(2) + "\n", files);
  RunOutcome outcome = effective_precision(spec.precision) == Precision::f64
                           ? run_typed<double>(spec, log)
                           : run_typed<float>(spec, log);
  outcome.files.insert(outcome.files.begin(), files.begin(), files.end());
  return outcome;
}

VerifyOutcome run_verify(VerifyTarget target, const ExperimentSpec& spec, std::ostream& log) {
  spec.validate();
  const bool f64 = effective_precision(spec.precision) == Precision::f64;
  switch (target) {
    case VerifyTarget::lemma2:
      return verify_lemma2_flow(spec, log);
    case VerifyTarget::lemma1:
      return f64 ? verify_lemma1_flow<double>(spec, log) : verify_lemma1_flow<float>(spec, log);
    case VerifyTarget::theorem1:
      return f64 ? verify_theorem1_flow<double>(spec, log)
                 : verify_theorem1_flow<float>(spec, log);
  }
  throw ConfigError("unknown verify target");
}

std::string line_plot_svg(const std::string& title, const std::string& y_label,
                          const std::vector<SeriesPlot>& series) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  const double width = 480, height = 320, left = 60, right = 120, top = 36, bottom = 44;
  const double pw = width - left - right, ph = height - top - bottom;
  std::size_t n = 0;
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values) {
      if (!std::isfinite(v)) continue;
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    }
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double xmax = n > 1 ? static_cast<double>(n - 1) : 1.0;
  auto sx = [&](double x) { return left + pw * x / xmax; };
  auto sy = [&](double y) { return top + ph * (1.0 - (y - lo) / (hi - lo)); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << xml_escape(title) << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\""
     << top + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const double x = sx(static_cast<double>(i));
    os << "<text x=\"" << x << "\" y=\"" << top + ph + 14 << "\" text-anchor=\"middle\">" << i
       << "</text>\n";
  }
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    os << "<text x=\"" << left - 6 << "\" y=\"" << sy(v) + 4 << "\" text-anchor=\"end\">"
       << svg_number(v) << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 8
     << "\" text-anchor=\"middle\">layer</text>\n";
  os << "<text x=\"14\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 14 " << top + ph / 2
     << ")\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 5];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].values.size(); ++i) {
      if (!std::isfinite(series[s].values[i])) continue;
      os << sx(static_cast<double>(i)) << ',' << sy(series[s].values[i]) << ' ';
    }
    os << "\"/>\n";
    const double ly = top + 14.0 * static_cast<double>(s);
    os << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 30
       << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << left + pw + 34 << "\" y=\"" << ly + 4 << "\">"
       << xml_escape(series[s].label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace bamboo

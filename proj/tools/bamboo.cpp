// Command line front end: plan, run, verify, gradcheck, dump-data.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bamboo/experiment.hpp"
#include "bamboo/gradcheck.hpp"
#include "bamboo/planner.hpp"
#include "bamboo/random.hpp"
#include "bamboo/synth.hpp"

namespace {

using namespace bamboo;

constexpr int kExitError = 1;

std::vector<std::size_t> parse_depths(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const auto v = std::stoul(item, &used);
    if (used != item.size() || v == 0) throw ConfigError("bad depth '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--depths is empty");
  return out;
}

Band parse_band(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw ConfigError("--band expects lo,hi");
  return {std::stod(text.substr(0, comma)), std::stod(text.substr(comma + 1))};
}

int cmd_plan(const std::string& ref_name, const std::string& depths_text,
             const std::string& band_text, const std::string& csv_path, bool all,
             std::size_t head_dim) {
  const auto ref = reference_scale(ref_name);
  const auto band = parse_band(band_text);
  PlanContext ctx;
  ctx.head_dim = head_dim;
  std::vector<PlannedConfig> rows;
  for (auto depth : parse_depths(depths_text)) {
    auto candidates = plan_widths(depth, ref, band, ctx);
    if (all) {
      rows.insert(rows.end(), candidates.begin(), candidates.end());
    } else {
      rows.push_back(candidates.front());
    }
  }
  std::cout << "reference " << ref.name << " (" << ref.depth << ", " << ref.width << ")\n";
  std::cout << format_plan_table(rows);
  if (!csv_path.empty()) {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw Error("cannot open " + csv_path + " for writing");
    out << plan_csv(rows);
  }
  return 0;
}

ExperimentSpec load_with_override(const std::string& path, const std::string& output) {
  auto spec = load_experiment(path);
  if (!output.empty()) spec.outputs.directory = output;
  return spec;
}

int cmd_run(const std::string& path, const std::string& output) {
  const auto spec = load_with_override(path, output);
  const auto outcome = run_experiment(spec, std::cerr);
  for (const auto& f : outcome.files) std::cout << f.string() << '\n';
  if (outcome.exit_code != 0) std::cerr << "error: " << outcome.message << '\n';
  return outcome.exit_code;
}

int cmd_verify(const std::string& which, const std::string& path, const std::string& output) {
  const auto target = parse_verify_target(which);
  const auto spec = load_with_override(path, output);
  const auto outcome = run_verify(target, spec, std::cerr);
  std::cout << to_string(target) << ": " << to_string(outcome.status) << " - " << outcome.summary
            << "\nreport: " << outcome.report.string() << '\n';
  return exit_code(outcome.status);
}

struct GradcheckOptions {
  std::size_t depth = 1;
  std::size_t width = 16;
  std::size_t heads = 2;
  std::size_t seq_len = 6;
  std::size_t patch_dim = 6;
  std::size_t classes = 3;
  std::string objective = "classifier";
  std::string norm = "pre";
  double h = 1e-5;
  double threshold = 1e-5;
  std::uint64_t seed = 0;
};

int cmd_gradcheck(const GradcheckOptions& o) {
  ModelConfig model;
  model.depth = o.depth;
  model.width = o.width;
  model.heads = o.heads;
  model.seq_len = o.seq_len;
  model.patch_dim = o.patch_dim;
  model.num_classes = o.classes;
  model.norm = parse_norm_placement(o.norm);
  TrainConfig train;
  train.objective = parse_objective(o.objective);
  SyntheticSpec data;
  data.seq_len = o.seq_len;
  data.patch_dim = o.patch_dim;
  data.num_classes = o.classes;
  data.max_freq = 1;
  data.seed = o.seed;
  const auto sample = generate(data, 1).samples.front();
  std::optional<MaskPlan> mask;
  if (train.objective == Objective::mae) {
    Rng rng(derive_seed(o.seed, 99));
    mask = sample_mask(model.seq_len, train.mask_ratio, rng);
  }
  const auto r = grad_check_model(model, train, sample, mask ? &*mask : nullptr, o.seed, o.h);
  std::printf("coordinates %zu  max relative error %.3e (input %zu, index %zu: analytic %.6e, "
              "numeric %.6e)\n",
              r.coordinates, r.max_relative_error, r.worst_input, r.worst_index, r.analytic,
              r.numeric);
  return r.max_relative_error < o.threshold ? 0 : 1;
}

int cmd_dump(const std::string& spec_path, const std::string& out_path, std::size_t n,
             std::optional<std::uint64_t> seed) {
  SyntheticSpec data;
  if (!spec_path.empty()) {
    const auto spec = load_experiment(spec_path);
    data = spec.data.spec;
    if (n == 0) n = spec.data.samples;
  }
  if (seed) data.seed = *seed;
  if (n == 0) n = 256;
  dump_dataset(out_path, generate(data, n));
  std::cout << "wrote " << n << " sequences to " << out_path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth-scaling transformer experiments: planner, training runs and verifiers"};
  app.require_subcommand(1);

  auto* plan = app.add_subcommand("plan", "Compute-matched deeper/narrower configurations");
  std::string ref = "base", depths = "12,24,48,96", band = "0.85,1.15", csv;
  bool all = false;
  std::size_t head_dim = kHeadDim;
  plan->add_option("--ref", ref, "base, large, huge or L,d")->capture_default_str();
  plan->add_option("--depths", depths, "Comma separated depths")->capture_default_str();
  plan->add_option("--band", band, "Cost ratio band lo,hi")->capture_default_str();
  plan->add_option("--csv", csv, "Also write the rows as CSV");
  plan->add_option("--head-dim", head_dim, "Head dimension")->capture_default_str();
  plan->add_flag("--all", all, "Print every in-band width, not just the closest");

  auto* run = app.add_subcommand("run", "Run an experiment spec");
  std::string run_spec, run_out;
  run->add_option("spec", run_spec, "Experiment spec (JSON)")->required();
  run->add_option("--output", run_out, "Override outputs.directory");

  auto* verify = app.add_subcommand("verify", "Empirical checks: lemma1, lemma2, theorem1");
  std::string which, verify_spec, verify_out;
  verify->add_option("which", which, "lemma1, lemma2 or theorem1")->required();
  verify->add_option("spec", verify_spec, "Experiment spec (JSON)")->required();
  verify->add_option("--output", verify_out, "Override outputs.directory");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full model loss");
  GradcheckOptions go;
  gc->add_option("--depth", go.depth)->capture_default_str();
  gc->add_option("--width", go.width)->capture_default_str();
  gc->add_option("--heads", go.heads)->capture_default_str();
  gc->add_option("--seq-len", go.seq_len)->capture_default_str();
  gc->add_option("--patch-dim", go.patch_dim)->capture_default_str();
  gc->add_option("--classes", go.classes)->capture_default_str();
  gc->add_option("--objective", go.objective, "classifier or mae")->capture_default_str();
  gc->add_option("--norm", go.norm, "pre or post")->capture_default_str();
  gc->add_option("--step", go.h, "Finite-difference step")->capture_default_str();
  gc->add_option("--threshold", go.threshold, "Pass threshold")->capture_default_str();
  gc->add_option("--seed", go.seed)->capture_default_str();

  auto* dump = app.add_subcommand("dump-data", "Write a synthetic dataset in binary form");
  std::string dump_spec, dump_out;
  std::size_t dump_n = 0;
  std::optional<std::uint64_t> dump_seed;
  dump->add_option("--spec", dump_spec, "Take the data section from this spec");
  dump->add_option("--out", dump_out, "Output file")->required();
  dump->add_option("-n,--count", dump_n, "Number of sequences");
  dump->add_option("--seed", dump_seed, "Override the data seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitError;
  }

  try {
    if (*plan) return cmd_plan(ref, depths, band, csv, all, head_dim);
    if (*run) return cmd_run(run_spec, run_out);
    if (*verify) return cmd_verify(which, verify_spec, verify_out);
    if (*gc) return cmd_gradcheck(go);
    if (*dump) return cmd_dump(dump_spec, dump_out, dump_n, dump_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}

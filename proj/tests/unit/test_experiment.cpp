#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bamboo/experiment.hpp"

using namespace bamboo;
using nlohmann::json;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const char* env = std::getenv("BAMBOO_TEST_TMP");
  const std::filesystem::path base =
      env ? std::filesystem::path(env) : std::filesystem::temp_directory_path() / "bamboo_unit";
  const auto dir = base / name;
  std::filesystem::remove_all(dir);
  return dir;
}

json tiny_spec(const std::filesystem::path& out) {
  auto doc = json::parse(R"({
    "name": "tiny",
    "kind": "train",
    "data": {"seq_len": 8, "patch_dim": 8, "num_classes": 4, "components": 2, "max_freq": 2,
             "noise_sigma": 0.1, "seed": 3, "samples": 20},
    "model": {"depth": 2, "width": 16, "heads": 2, "activation": "relu"},
    "train": {"objective": "classifier", "epochs": 2, "batch_size": 4},
    "diagnostics": {"eval_samples": 4},
    "repeat_seeds": [0, 1]
  })");
  doc["outputs"] = {{"directory", out.string()}};
  return doc;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> csv_files(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.path().extension() == ".csv") {
      out[std::filesystem::relative(e.path(), root).string()] = slurp(e.path());
    }
  }
  return out;
}

}  // namespace

TEST_CASE("spec parsing fills defaults and inherits shapes from data") {
  const auto spec = parse_experiment(tiny_spec("out"));
  CHECK(spec.name == "tiny");
  CHECK(spec.kind == ExperimentKind::train);
  CHECK(spec.model.seq_len == 8);
  CHECK(spec.model.patch_dim == 8);
  CHECK(spec.model.num_classes == 4);
  CHECK(spec.model.activation == Activation::relu);
  CHECK(spec.train.learning_rate == 1e-3);
  CHECK(spec.repeat_seeds == std::vector<std::uint64_t>{0, 1});
  CHECK(spec.diagnostics.positions == PositionMode::non_special);
  CHECK(spec.precision == Precision::f32);
  CHECK_FALSE(spec.pretrain);
}

TEST_CASE("unknown keys and bad values are errors naming the path") {
  auto doc = tiny_spec("out");
  doc["model"]["dept"] = 3;
  CHECK_THROWS_WITH_AS(parse_experiment(doc), doctest::Contains("model.dept"), ConfigError);

  doc = tiny_spec("out");
  doc["colour"] = "blue";
  CHECK_THROWS_WITH_AS(parse_experiment(doc), doctest::Contains("colour"), ConfigError);

  doc = tiny_spec("out");
  doc["train"]["epochs"] = "many";
  CHECK_THROWS_WITH_AS(parse_experiment(doc), doctest::Contains("train.epochs"), ConfigError);

  doc = tiny_spec("out");
  doc["model"]["seq_len"] = 9;
  CHECK_THROWS_AS(parse_experiment(doc), ConfigError);

  doc = tiny_spec("out");
  doc["repeat_seeds"] = json::array();
  CHECK_THROWS_AS(parse_experiment(doc), ConfigError);

  doc = tiny_spec("out");
  doc["kind"] = "objective_pair";
  CHECK_THROWS_WITH_AS(parse_experiment(doc), doctest::Contains("pretrain"), ConfigError);

  doc = tiny_spec("out");
  doc["model"]["heads"] = 3;
  CHECK_THROWS_AS(parse_experiment(doc), ConfigError);

  CHECK_THROWS_AS(load_experiment("/nonexistent/spec.json"), ConfigError);
}

TEST_CASE("resolved spec round-trips") {
  auto doc = tiny_spec("out");
  doc["pretrain"] = {{"objective", "mae"}, {"epochs", 1}, {"mask_ratio", 0.5}};
  const auto spec = parse_experiment(doc);
  const auto again = parse_experiment(to_json(spec));
  CHECK(resolved_spec(again) == resolved_spec(spec));
  REQUIRE(again.pretrain);
  CHECK(again.pretrain->mask_ratio == 0.5);
}

TEST_CASE("precision override from the environment") {
  ::unsetenv("BAMBOO_PRECISION");
  CHECK(effective_precision(Precision::f32) == Precision::f32);
  ::setenv("BAMBOO_PRECISION", "f64", 1);
  CHECK(effective_precision(Precision::f32) == Precision::f64);
  ::setenv("BAMBOO_PRECISION", "f16", 1);
  CHECK_THROWS_AS(effective_precision(Precision::f32), ConfigError);
  ::unsetenv("BAMBOO_PRECISION");
}

TEST_CASE("train run writes reports and reruns byte for byte") {
  const auto dir = scratch("train_run");
  const auto spec = parse_experiment(tiny_spec(dir));
  std::ostringstream log;
  const auto first = run_experiment(spec, log);
  CHECK(first.exit_code == 0);
  for (const char* f : {"spec.resolved.json", "summary.csv", "aggregate_diagnostics.csv",
                        "seed_0/loss.csv", "seed_0/diagnostics.csv", "seed_1/diagnostics.csv"}) {
    CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
  }
  const auto summary = slurp(dir / "summary.csv");
  CHECK(summary.find("seed,objective,final_loss,test_accuracy,mean_delta_var,ms_slope,"
                     "final_centered_cos,diverged\n") != std::string::npos);
  CHECK(slurp(dir / "seed_0/diagnostics.csv").rfind("# model_id=", 0) == 0);

  const auto before = csv_files(dir);
  CHECK(before.size() == 6);
  run_experiment(spec, log);
  CHECK(csv_files(dir) == before);
}

TEST_CASE("objective pair and depth sweep runs") {
  const auto dir = scratch("pair_run");
  auto doc = tiny_spec(dir);
  doc["kind"] = "objective_pair";
  doc["repeat_seeds"] = {0};
  doc["pretrain"] = {{"objective", "mae"}, {"epochs", 1}, {"batch_size", 4}};
  doc["outputs"]["svg"] = true;
  std::ostringstream log;
  CHECK(run_experiment(parse_experiment(doc), log).exit_code == 0);
  CHECK(std::filesystem::exists(dir / "seed_0/diagnostics_classifier.csv"));
  CHECK(std::filesystem::exists(dir / "seed_0/diagnostics_mae.csv"));
  CHECK(std::filesystem::exists(dir / "aggregate_diagnostics_mae.csv"));
  const auto svg = slurp(dir / "seed_0/ms.svg");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("mae") != std::string::npos);

  const auto sweep_dir = scratch("sweep_run");
  doc = tiny_spec(sweep_dir);
  doc["kind"] = "depth_sweep";
  doc["repeat_seeds"] = {0};
  doc["pretrain"] = {{"objective", "mae"}, {"epochs", 1}, {"batch_size", 4}};
  doc["sweep"] = {{"depths", {1, 4}}, {"reference_depth", 1}, {"reference_width", 32},
                  {"head_dim", 8}};
  CHECK(run_experiment(parse_experiment(doc), log).exit_code == 0);
  const auto table = slurp(sweep_dir / "accuracy_vs_depth_all.csv");
  CHECK(table.find("seed,depth,width,heads,cost_ratio,scratch_accuracy,mae_finetuned_accuracy\n") !=
        std::string::npos);
  CHECK(table.find("\n0,1,32,4,1,") != std::string::npos);
  CHECK(table.find("\n0,4,16,2,1,") != std::string::npos);
}

TEST_CASE("verify exit statuses") {
  std::ostringstream log;

  // Identical objectives and seeds on both sides: a tie.
  auto doc = tiny_spec(scratch("verify_tie"));
  doc["repeat_seeds"] = {0};
  doc["pretrain"] = doc["train"];
  const auto tie = run_verify(VerifyTarget::theorem1, parse_experiment(doc), log);
  CHECK(tie.status == VerifyStatus::inconclusive);
  CHECK(exit_code(tie.status) == 2);
  const auto report = json::parse(slurp(tie.report));
  CHECK(report["exit_code"] == 2);
  CHECK(report.contains("spec"));

  // Untrained MAE model: convergence precondition unmet.
  doc = tiny_spec(scratch("verify_untrained"));
  doc["repeat_seeds"] = {0};
  doc["train"] = {{"objective", "mae"}, {"epochs", 0}};
  CHECK(run_verify(VerifyTarget::lemma1, parse_experiment(doc), log).status ==
        VerifyStatus::precondition_unmet);

  doc["train"]["objective"] = "classifier";
  CHECK_THROWS_AS(run_verify(VerifyTarget::lemma1, parse_experiment(doc), log), ConfigError);

  doc = tiny_spec(scratch("verify_lemma2"));
  doc["model"]["residual"] = false;
  doc["verify"] = {{"seeds", {0, 1, 2}}, {"pass_fraction", 0.0}};
  CHECK(run_verify(VerifyTarget::lemma2, parse_experiment(doc), log).status == VerifyStatus::pass);
  doc["model"]["residual"] = true;
  CHECK_THROWS_AS(run_verify(VerifyTarget::lemma2, parse_experiment(doc), log), ConfigError);

  CHECK(parse_verify_target("lemma2") == VerifyTarget::lemma2);
  CHECK_THROWS_AS(parse_verify_target("lemma3"), ConfigError);
}

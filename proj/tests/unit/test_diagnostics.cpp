#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "bamboo/diagnostics.hpp"
#include "bamboo/model.hpp"
#include "bamboo/synth.hpp"
#include "oracles.hpp"

using namespace bamboo;

namespace {

ActivationTrace trace_of(std::vector<Matrix<double>> layers) {
  ActivationTrace t;
  const std::size_t rows = layers.front().rows();
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) t.block_outputs.emplace_back(rows, layers[l].cols());
  t.layers = std::move(layers);
  t.masked.assign(rows, false);
  t.special.assign(rows, false);
  return t;
}

ModelConfig lemma2_config(bool residual) {
  ModelConfig c;
  c.depth = 8;
  c.width = 64;
  c.heads = 4;
  c.seq_len = 16;
  c.patch_dim = 16;
  c.activation = Activation::relu;
  c.residual = residual;
  return c;
}

}  // namespace

TEST_CASE("mean_token_std: hand examples") {
  const auto all2 = oracle::iota(2);
  CHECK(mean_token_std(Matrix<double>(2, 1, {0.0, 2.0}), all2) ==
        doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  CHECK(mean_token_std(Matrix<double>(4, 3, 1.5), oracle::iota(4)) == 0.0);
  CHECK_THROWS_WITH_AS(mean_token_std(Matrix<double>(3, 2), std::vector<std::size_t>{1}),
                       "ms undefined for T<2", DomainError);
  // The alternative mean denominator shifts the mean and raises the spread.
  const Matrix<double> h(2, 1, {0.0, 2.0});
  CHECK(mean_token_std(h, all2, MeanDenominator::tokens_minus_one) >
        mean_token_std(h, all2, MeanDenominator::tokens));
}

TEST_CASE("metrics match brute-force oracles on random layers") {
  std::mt19937_64 gen(77);
  for (int trial = 0; trial < 100; ++trial) {
    const auto rows = oracle::random_layer(gen, 2, 64, 1, 128);
    const auto h = oracle::from_rows(rows);
    const auto pos = oracle::iota(h.rows());
    CHECK(std::abs(mean_token_std(h, pos) - oracle::mean_token_std(rows)) < 1e-10);
    CHECK(std::abs(centered_pair_cosine(h, pos).value - oracle::centered_pair_cosine(rows)) < 1e-10);
    CHECK(std::abs(layer_variance(h, pos) - oracle::layer_variance(rows)) < 1e-10);
  }
}

TEST_CASE("metrics on a subset of positions use only those rows") {
  std::mt19937_64 gen(5);
  const auto rows = oracle::random_layer(gen, 12, 12, 6, 6);
  const std::vector<std::size_t> pick{1, 4, 5, 9};
  oracle::Rows subset;
  for (auto p : pick) subset.push_back(rows[p]);
  const auto h = oracle::from_rows(rows);
  CHECK(std::abs(mean_token_std(h, pick) - oracle::mean_token_std(subset)) < 1e-12);
  CHECK(std::abs(centered_pair_cosine(h, pick).value - oracle::centered_pair_cosine(subset)) < 1e-12);
  CHECK(std::abs(layer_variance(h, pick) - oracle::layer_variance(subset)) < 1e-12);
}

TEST_CASE("centered pair cosine: two tokens are antipodes") {
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 200; ++trial) {
    const auto rows = oracle::random_layer(gen, 2, 2, 1, 128);
    const auto r = centered_pair_cosine(oracle::from_rows(rows), oracle::iota(2));
    CHECK(r.value == -1.0);
    CHECK_FALSE(r.degenerate);
  }
}

TEST_CASE("centered pair cosine: degenerate conventions") {
  const auto same = centered_pair_cosine(Matrix<double>(5, 3, 0.7), oracle::iota(5));
  CHECK(same.value == 1.0);
  CHECK(same.degenerate);

  // Rows 0 and 1 equal the column mean, rows 2 and 3 are opposite.
  const Matrix<double> h(4, 1, {0.0, 0.0, 1.0, -1.0});
  const auto r = centered_pair_cosine(h, oracle::iota(4));
  // pairs: (0,1) both zero -> 1, (0,2) (0,3) (1,2) (1,3) one zero -> 0, (2,3) -> -1
  CHECK(r.value == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(r.degenerate);
  CHECK_THROWS_AS(centered_pair_cosine(h, std::vector<std::size_t>{0}), DomainError);
}

TEST_CASE("metric symmetries") {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 30; ++trial) {
    auto rows = oracle::random_layer(gen, 3, 20, 1, 16);
    const auto h = oracle::from_rows(rows);
    const auto pos = oracle::iota(h.rows());
    const double ms = mean_token_std(h, pos);
    const double cos = centered_pair_cosine(h, pos).value;
    const double var = layer_variance(h, pos);

    std::shuffle(rows.begin(), rows.end(), gen);
    const auto p = oracle::from_rows(rows);
    CHECK(mean_token_std(p, pos) == doctest::Approx(ms).epsilon(1e-12));
    CHECK(centered_pair_cosine(p, pos).value == doctest::Approx(cos).epsilon(1e-12));
    CHECK(layer_variance(p, pos) == doctest::Approx(var).epsilon(1e-12));

    for (double c : {-2.5, 0.1, 7.0}) {
      auto scaled = h;
      for (auto& v : scaled.data()) v *= c;
      CHECK(mean_token_std(scaled, pos) == doctest::Approx(std::abs(c) * ms).epsilon(1e-12));
      CHECK(centered_pair_cosine(scaled, pos).value == doctest::Approx(cos).epsilon(1e-10));
    }
    const auto cr = centered_pair_cosine(h, pos).value;
    CHECK(cr >= -1.0);
    CHECK(cr <= 1.0);
  }
}

TEST_CASE("layer variance: hand examples") {
  CHECK(layer_variance(Matrix<double>(6, 2, 3.0), oracle::iota(6)) == 0.0);
  const Matrix<double> alt(6, 1, {1.0, -1.0, 1.0, -1.0, 1.0, -1.0});
  CHECK(layer_variance(alt, oracle::iota(6)) == 1.0);
  const auto t = trace_of({Matrix<double>(4, 2, 1.0), Matrix<double>(4, 2, 2.0)});
  CHECK(variance_trace(t, PositionMode::all) == std::vector<double>{0.0, 0.0});
}

TEST_CASE("position selection") {
  auto t = trace_of({Matrix<double>(4, 2)});
  t.special[0] = true;
  t.masked[2] = true;
  CHECK(select_positions(t, PositionMode::all) == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(select_positions(t, PositionMode::non_special) == std::vector<std::size_t>{1, 2, 3});
  CHECK(select_positions(t, PositionMode::masked) == std::vector<std::size_t>{2});
  CHECK(parse_position_mode("non_special") == PositionMode::non_special);
  CHECK_THROWS_AS(parse_position_mode("visible"), ConfigError);
}

TEST_CASE("diagnose: per-layer report, deltas and slope") {
  std::vector<Matrix<double>> layers;
  for (int l = 0; l < 4; ++l) {
    Matrix<double> h(3, 1, {0.0, 1.0 * (l + 1), 2.0 * (l + 1)});
    layers.push_back(h);
  }
  const auto r = diagnose(trace_of(layers), PositionMode::all);
  REQUIRE(r.layers.size() == 4);
  CHECK(r.delta_var.size() == 3);
  for (int l = 0; l < 4; ++l) {
    CHECK(r.layers[l].ms == doctest::Approx(l + 1.0).epsilon(1e-14));
    CHECK(r.layers[l].var == doctest::Approx(2.0 / 3.0 * (l + 1) * (l + 1)).epsilon(1e-14));
  }
  CHECK(r.delta_var[0] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(r.ms_slope() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(r.mean_delta_var() ==
        doctest::Approx((r.layers[3].var - r.layers[0].var) / 3.0).epsilon(1e-14));

  const auto twice = diagnose_all(std::vector<ActivationTrace>{trace_of(layers), trace_of(layers)},
                                  PositionMode::all);
  CHECK(twice.traces == 2);
  CHECK(twice.layers[2].ms == doctest::Approx(r.layers[2].ms).epsilon(1e-15));

  const auto flat = diagnose(trace_of({Matrix<double>(3, 1, 1.0), layers[0]}), PositionMode::all);
  CHECK(flat.degenerate_layers == std::vector<std::size_t>{0});
  CHECK(flat.layers[0].degenerate);
}

TEST_CASE("diagnostic CSV layout") {
  std::vector<Matrix<double>> layers{Matrix<double>(2, 1, {0.0, 2.0}), Matrix<double>(2, 1, {0.0, 4.0})};
  ReportMetadata meta;
  meta.model_id = "m";
  meta.objective = "mae";
  meta.config = "{}";
  meta.seed = 3;
  meta.positions = PositionMode::all;
  const auto csv = report_csv(diagnose(trace_of(layers), PositionMode::all, meta));
  CHECK(csv.rfind("# model_id=m objective=mae seed=3 positions=all traces=1", 0) == 0);
  const auto body = csv.substr(csv.find('\n') + 1);
  CHECK(body.rfind("layer,ms,centered_cos,var,delta_var,degenerate\n", 0) == 0);
  CHECK(std::count(body.begin(), body.end(), '\n') == 3);
  // delta_var is blank on the final layer row
  CHECK(body.substr(body.size() - 3) == ",0\n");
  CHECK(body.find(",,0\n") != std::string::npos);
}

TEST_CASE("Lemma 2 verifier") {
  const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  // Beyond four residual-free layers the variance sits below the slack.
  auto shallow = lemma2_config(false);
  shallow.depth = 4;
  const auto r = verify_lemma2(shallow, seeds);
  CHECK(r.passed.size() == seeds.size());
  CHECK(r.pass_fraction >= 0.8);
  for (const auto& v : r.variances) CHECK(v.size() == 5);
  CHECK_THROWS_AS(verify_lemma2(lemma2_config(true), seeds), ConfigError);
  CHECK_THROWS_AS(check_residual_growth(lemma2_config(false), seeds), ConfigError);

  auto one = lemma2_config(false);
  one.depth = 1;
  const auto single = verify_lemma2(one, seeds);
  for (const auto& v : single.variances) CHECK(v.size() == 2);

  const auto grow = check_residual_growth(lemma2_config(true), seeds);
  CHECK(grow.pass_fraction >= 0.8);
  CHECK(init_variance_profile(lemma2_config(false), 9) == init_variance_profile(lemma2_config(false), 9));
}

TEST_CASE("Lemma 1 assessment") {
  std::mt19937_64 gen(4);
  std::vector<Matrix<double>> targets;
  for (int i = 0; i < 5; ++i) targets.push_back(oracle::random_matrix(gen, 6, 4));
  const auto perfect = assess_lemma1(targets, targets, 0.3, 0.3);
  CHECK(perfect.status == VerifyStatus::pass);
  CHECK(perfect.var_pred == perfect.sigma_sq);
  CHECK(perfect.loss == 0.0);

  // Constant output: converged only under a loose factor, and then it fails.
  std::vector<Matrix<double>> zeros(5, Matrix<double>(6, 4));
  const auto flat = assess_lemma1(zeros, targets, 0.3, 1e9);
  CHECK(flat.converged);
  CHECK(flat.var_pred == 0.0);
  CHECK(flat.status == VerifyStatus::fail);

  const auto unconverged = assess_lemma1(zeros, targets, 0.3, 0.3);
  CHECK_FALSE(unconverged.converged);
  CHECK(unconverged.status == VerifyStatus::precondition_unmet);
  CHECK(exit_code(VerifyStatus::precondition_unmet) == 3);
  CHECK(exit_code(VerifyStatus::inconclusive) == 2);
  CHECK(exit_code(VerifyStatus::fail) == 1);
  CHECK(exit_code(VerifyStatus::pass) == 0);
}

TEST_CASE("identical untrained models tie in the residual comparison") {
  ModelConfig c = lemma2_config(true);
  c.depth = 2;
  c.width = 16;
  c.heads = 2;
  SyntheticSpec s;
  s.seq_len = 16;
  s.patch_dim = 16;
  const auto data = generate(s, 4);
  const auto p = build<double>(c, 1);
  TracedModel<double> a{&p, "mae", std::nullopt}, b{&p, "classifier", std::nullopt};
  const auto r = compare_residual_delta(a, b, c, c, data, 7);
  CHECK(r.status == VerifyStatus::inconclusive);
  CHECK(r.mae_mean_delta == r.classifier_mean_delta);
  CHECK(r.mae.delta_var.size() == c.depth);
  CHECK(r.classifier.delta_var.size() == c.depth);

  auto other = c;
  other.width = 32;
  CHECK_THROWS_AS(compare_residual_delta(a, b, c, other, data, 7), ConfigError);
}

#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "bamboo/planner.hpp"

using namespace bamboo;

namespace {

struct Row {
  const char* reference;
  std::size_t depth, width, heads;
  double cost;
};

// Configurations and printed costs from the two published tables.
const Row kTableRows[] = {
    {"base", 12, 768, 12, 1.0},  {"base", 24, 512, 8, 0.9},   {"base", 48, 384, 6, 1.0},
    {"base", 96, 256, 4, 0.9},   {"large", 24, 1024, 16, 1.0}, {"large", 48, 768, 12, 1.1},
    {"large", 60, 640, 10, 1.0}, {"large", 96, 512, 8, 1.0},  {"huge", 64, 896, 14, 1.0},
};

ModelConfig at(std::size_t depth, std::size_t width) {
  ModelConfig c;
  c.depth = depth;
  c.width = width;
  c.heads = width / 64;
  c.seq_len = 196;
  c.patch_dim = 768;
  c.num_classes = 1000;
  return c;
}

}  // namespace

TEST_CASE("cost ratio examples") {
  CHECK(cost_ratio({48, 384}, {12, 768}) == 1.0);
  CHECK(cost_ratio({24, 512}, {12, 768}) == doctest::Approx(8.0 / 9.0).epsilon(1e-15));
  CHECK(cost_ratio({48, 768}, {24, 1024}) == 1.125);
  CHECK(cost_ratio({64, 896}, {32, 1280}) == doctest::Approx(0.98).epsilon(1e-15));
  for (std::size_t l : {1, 7, 48}) {
    for (std::size_t d : {1, 64, 1000}) CHECK(cost_ratio({l, d}, {l, d}) == 1.0);
  }
  CHECK_THROWS_AS(cost_ratio({0, 64}, {12, 768}), DomainError);
}

TEST_CASE("rounding is half away from zero") {
  CHECK(round_half_away(1.125, 1) == 1.1);
  CHECK(round_half_away(0.25, 1) == 0.3);
  CHECK(round_half_away(-0.25, 1) == -0.3);
  CHECK(round_half_away(0.98, 1) == 1.0);
  CHECK(round_half_away(0.8889, 1) == 0.9);
}

TEST_CASE("published table rows: ratio, heads and membership in the planned set") {
  for (const auto& row : kTableRows) {
    CAPTURE(row.reference);
    CAPTURE(row.depth);
    const auto ref = reference_scale(row.reference);
    const auto plan = plan_config(row.depth, row.width, ref);
    CHECK(round_half_away(plan.cost_ratio, 1) == row.cost);
    CHECK(plan.heads == row.heads);
    CHECK(plan.heads * 64 == row.width);
    const auto set = plan_widths(row.depth, ref);
    CHECK(std::any_of(set.begin(), set.end(), [&](const PlannedConfig& p) {
      return p.width == row.width && p.heads == row.heads;
    }));
  }
}

TEST_CASE("plan_widths examples") {
  const auto base96 = plan_widths(96, reference_scale("base"));
  const auto it = std::find_if(base96.begin(), base96.end(),
                               [](const PlannedConfig& p) { return p.width == 256; });
  REQUIRE(it != base96.end());
  CHECK(it->heads == 4);
  CHECK(it->cost_ratio == doctest::Approx(0.889).epsilon(1e-3));

  const auto large60 = plan_widths(60, reference_scale("large"));
  CHECK(large60.front().width == 640);
  CHECK(large60.front().heads == 10);
  CHECK(large60.front().cost_ratio == doctest::Approx(0.977).epsilon(1e-3));

  const auto large48 = plan_widths(48, reference_scale("large"));
  std::vector<std::size_t> widths;
  for (const auto& p : large48) widths.push_back(p.width);
  CHECK(std::find(widths.begin(), widths.end(), 704) != widths.end());
  CHECK(std::find(widths.begin(), widths.end(), 768) != widths.end());
  CHECK(large48.front().width == 704);

  const auto identity = plan_widths(12, reference_scale("base"));
  CHECK(identity.front().width == 768);
  CHECK(identity.front().cost_ratio == 1.0);
}

TEST_CASE("plan_widths is sorted, deterministic and reports empty bands") {
  for (std::size_t depth : {6, 12, 24, 40, 96}) {
    const auto a = plan_widths(depth, reference_scale("base"));
    const auto b = plan_widths(depth, reference_scale("base"));
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].width == b[i].width);
      CHECK(a[i].width % 64 == 0);
      CHECK(a[i].cost_ratio >= 0.85);
      CHECK(a[i].cost_ratio <= 1.15);
      if (i > 0) CHECK(std::abs(a[i - 1].cost_ratio - 1.0) <= std::abs(a[i].cost_ratio - 1.0));
    }
  }
  try {
    plan_widths(96, reference_scale("base"), Band{0.95, 1.05});
    FAIL("expected an empty band error");
  } catch (const DomainError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("256") != std::string::npos);
    CHECK(msg.find("320") != std::string::npos);
  }
}

TEST_CASE("reference scales") {
  CHECK(reference_scale("base").depth == 12);
  CHECK(reference_scale("large").width == 1024);
  CHECK(reference_scale("huge").width == 1280);
  const auto custom = reference_scale("2,128");
  CHECK(custom.depth == 2);
  CHECK(custom.width == 128);
  CHECK_THROWS_AS(reference_scale("giant"), ConfigError);
  CHECK_THROWS_AS(reference_scale("2,x"), ConfigError);
}

TEST_CASE("parameter count") {
  CHECK(param_breakdown(at(12, 768)).block_weights == 84934656u);
  CHECK(param_breakdown(at(1, 64)).block_weights == 49152u);
  // Independent itemization for a small model.
  ModelConfig c;
  c.depth = 2;
  c.width = 8;
  c.heads = 2;
  c.seq_len = 5;
  c.patch_dim = 3;
  c.num_classes = 4;
  c.use_cls_token = true;
  const std::size_t d = 8, f = 32;
  const std::size_t per_block = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
  const std::size_t want = (3 * d + d) + 6 * d + d + d + 2 * per_block + (d * 4 + 4) + (d * 3 + 3);
  CHECK(param_count(c) == want);
}

TEST_CASE("flops per token") {
  const auto b = flops_breakdown(at(12, 768), 196);
  CHECK(static_cast<double>(b.attention) / static_cast<double>(b.total()) < 0.05);
  CHECK(b.block_weights == 2u * 12 * 12 * 768 * 768);

  const double exact = static_cast<double>(flops_per_token(at(48, 384), 196)) /
                       static_cast<double>(flops_per_token(at(12, 768), 196));
  CHECK(std::abs(exact / cost_ratio({48, 384}, {12, 768}) - 1.0) < 0.02);

  const auto f0 = flops_per_token(at(12, 768), 196);
  CHECK(flops_per_token(at(13, 768), 196) > f0);
  CHECK(flops_per_token(at(12, 832), 196) > f0);
  CHECK(flops_per_token(at(12, 768), 197) > f0);
}

TEST_CASE("plan table and CSV") {
  const auto rows = std::vector<PlannedConfig>{plan_config(64, 896, reference_scale("huge"))};
  const auto table = format_plan_table(rows);
  CHECK(table.find("Depth") != std::string::npos);
  CHECK(table.find("#Attention Heads") != std::string::npos);
  CHECK(table.find("1x") != std::string::npos);
  CHECK(table.find("896") != std::string::npos);
  const auto csv = plan_csv(rows);
  CHECK(csv.rfind("depth,width,heads,cost_ratio,cost_rounded,param_count,flops_per_token\n", 0) == 0);
  CHECK(csv.find("\n64,896,14,") != std::string::npos);
}

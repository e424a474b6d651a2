#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bamboo/model.hpp"

namespace bamboo {

inline constexpr std::size_t kHeadDim = 64;

struct ReferenceScale {
  std::string name;
  std::size_t depth = 0;
  std::size_t width = 0;
};

// base=(12,768), large=(24,1024), huge=(32,1280). Also accepts "L,d".
ReferenceScale reference_scale(const std::string& name);
const std::vector<ReferenceScale>& reference_scales();

// Parameter count split by role. block_weights is (4 + 2·ffn_mult)·L·d².
struct ParamBreakdown {
  std::size_t patch_embed = 0;     // weight p·d plus bias d
  std::size_t embeddings = 0;      // positions, CLS and mask token
  std::size_t block_weights = 0;
  std::size_t block_biases = 0;
  std::size_t block_norms = 0;
  std::size_t final_norm = 0;
  std::size_t classifier = 0;      // weight plus bias
  std::size_t reconstruction = 0;  // weight plus bias

  std::size_t total() const {
    return patch_embed + embeddings + block_weights + block_biases + block_norms + final_norm +
           classifier + reconstruction;
  }
};

ParamBreakdown param_breakdown(const ModelConfig& config);
std::size_t param_count(const ModelConfig& config);

// Multiply-adds counted twice, for one token of a classification forward
// pass over T tokens.
struct FlopBreakdown {
  std::uint64_t patch_embed = 0;
  std::uint64_t block_weights = 0;
  std::uint64_t attention = 0;  // 2·T·d per layer
  std::uint64_t classifier = 0;

  std::uint64_t total() const { return patch_embed + block_weights + attention + classifier; }
};

FlopBreakdown flops_breakdown(const ModelConfig& config, std::size_t tokens);
std::uint64_t flops_per_token(const ModelConfig& config, std::size_t tokens);

// (L_c·d_c²)/(L_r·d_r²).
double cost_ratio(std::pair<std::size_t, std::size_t> candidate,
                  std::pair<std::size_t, std::size_t> reference);

// Rounds half away from zero to `digits` decimals.
double round_half_away(double x, int digits);

// Input and head sizes used for the param and flop columns of a plan.
// Defaults follow a 224px image with 16px patches and 1000 classes.
struct PlanContext {
  std::size_t patch_dim = 768;
  std::size_t num_classes = 1000;
  std::size_t seq_len = 196;
  std::size_t head_dim = kHeadDim;
};

struct PlannedConfig {
  std::size_t depth = 0;
  std::size_t width = 0;
  std::size_t heads = 0;
  double cost_ratio = 0.0;
  std::size_t param_count = 0;
  std::uint64_t flops_per_token = 0;
};

struct Band {
  double lo = 0.85;
  double hi = 1.15;
};

PlannedConfig plan_config(std::size_t depth, std::size_t width, const ReferenceScale& reference,
                          const PlanContext& context = {});

// All widths that are multiples of the head dimension with cost ratio inside
// the band, sorted by |ratio - 1| then width. Throws DomainError listing the
// nearest out-of-band widths when nothing fits.
std::vector<PlannedConfig> plan_widths(std::size_t depth, const ReferenceScale& reference,
                                       Band band = {}, const PlanContext& context = {});

// Depth, Width, #Attention Heads, Computation Cost rows.
std::string format_plan_table(const std::vector<PlannedConfig>& rows);
std::string plan_csv(const std::vector<PlannedConfig>& rows);

// Model config for a planned (depth, width) at desk scale.
ModelConfig planned_model(const ModelConfig& base, const PlannedConfig& plan);

}  // namespace bamboo

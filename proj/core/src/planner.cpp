#include "bamboo/planner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace bamboo {
namespace {

std::string format_cost(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", round_half_away(ratio, 1));
  return buf;
}

std::string format_ratio(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", ratio);
  return buf;
}

}  // namespace

const std::vector<ReferenceScale>& reference_scales() {
  static const std::vector<ReferenceScale> scales{
      {"base", 12, 768}, {"large", 24, 1024}, {"huge", 32, 1280}};
  return scales;
}

ReferenceScale reference_scale(const std::string& name) {
  for (const auto& s : reference_scales()) {
    if (s.name == name) return s;
  }
  const auto comma = name.find(',');
  if (comma != std::string::npos) {
    try {
      std::size_t used = 0;
      const auto depth = std::stoul(name.substr(0, comma), &used);
      const auto rest = name.substr(comma + 1);
      std::size_t used_w = 0;
      const auto width = std::stoul(rest, &used_w);
      if (used == comma && used_w == rest.size() && depth > 0 && width > 0) {
        return {name, depth, width};
      }
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("unknown reference '" + name + "' (expected base, large, huge or L,d)");
}

ParamBreakdown param_breakdown(const ModelConfig& config) {
  config.validate();
  const std::size_t L = config.depth, d = config.width, p = config.patch_dim;
  const std::size_t f = config.ffn_width(), C = config.num_classes;
  ParamBreakdown b;
  b.patch_embed = p * d + d;
  b.embeddings = config.sequence_rows() * d + (config.use_cls_token ? d : 0) + d;
  b.block_weights = L * (4 * d * d + 2 * d * f);
  b.block_biases = L * (4 * d + f + d);
  b.block_norms = L * 4 * d;
  b.final_norm = config.final_norm ? 2 * d : 0;
  b.classifier = d * C + C;
  b.reconstruction = d * p + p;
  return b;
}

std::size_t param_count(const ModelConfig& config) { return param_breakdown(config).total(); }

FlopBreakdown flops_breakdown(const ModelConfig& config, std::size_t tokens) {
  config.validate();
  if (tokens < 1) throw DomainError("flops_per_token: T must be >= 1");
  const std::uint64_t L = config.depth, d = config.width, p = config.patch_dim;
  const std::uint64_t f = config.ffn_width(), C = config.num_classes, T = tokens;
  FlopBreakdown b;
  b.patch_embed = 2 * p * d;
  b.block_weights = 2 * L * (4 * d * d + 2 * d * f);
  b.attention = 2 * L * T * d;
  b.classifier = 2 * d * C;
  return b;
}

std::uint64_t flops_per_token(const ModelConfig& config, std::size_t tokens) {
  return flops_breakdown(config, tokens).total();
}

double cost_ratio(std::pair<std::size_t, std::size_t> candidate,
                  std::pair<std::size_t, std::size_t> reference) {
  if (candidate.first == 0 || candidate.second == 0 || reference.first == 0 ||
      reference.second == 0) {
    throw DomainError("cost_ratio: dimensions must be positive");
  }
  const auto cost = [](std::pair<std::size_t, std::size_t> c) {
    const auto w = static_cast<double>(c.second);
    return static_cast<double>(c.first) * w * w;
  };
  return cost(candidate) / cost(reference);
}

double round_half_away(double x, int digits) {
  const double scale = std::pow(10.0, digits);
  return std::round(x * scale) / scale;
}

PlannedConfig plan_config(std::size_t depth, std::size_t width, const ReferenceScale& reference,
                          const PlanContext& context) {
  if (context.head_dim == 0 || width == 0 || width % context.head_dim != 0) {
    throw ConfigError("width " + std::to_string(width) + " is not a positive multiple of " +
                      std::to_string(context.head_dim));
  }
  ModelConfig m;
  m.depth = depth;
  m.width = width;
  m.heads = width / context.head_dim;
  m.seq_len = context.seq_len;
  m.patch_dim = context.patch_dim;
  m.num_classes = context.num_classes;
  PlannedConfig out;
  out.depth = depth;
  out.width = width;
  out.heads = m.heads;
  out.cost_ratio = cost_ratio({depth, width}, {reference.depth, reference.width});
  out.param_count = param_count(m);
  out.flops_per_token = flops_per_token(m, context.seq_len);
  return out;
}

std::vector<PlannedConfig> plan_widths(std::size_t depth, const ReferenceScale& reference,
                                       Band band, const PlanContext& context) {
  if (depth == 0) throw DomainError("plan_widths: depth must be positive");
  if (context.head_dim == 0) throw DomainError("plan_widths: head_dim must be positive");
  if (!(band.lo > 0.0 && band.lo <= band.hi)) throw DomainError("plan_widths: invalid band");
  std::vector<PlannedConfig> out;
  std::size_t below = 0, above = 0;
  for (std::size_t w = context.head_dim;; w += context.head_dim) {
    const double r = cost_ratio({depth, w}, {reference.depth, reference.width});
    if (r < band.lo) {
      below = w;
    } else if (r > band.hi) {
      above = w;
      break;
    } else {
      out.push_back(plan_config(depth, w, reference, context));
    }
  }
  if (out.empty()) {
    std::ostringstream msg;
    msg << "no width for depth " << depth << " within [" << band.lo << ", " << band.hi
        << "] of " << reference.name << "; nearest:";
    if (below) {
      msg << " width " << below << " (ratio "
          << format_ratio(cost_ratio({depth, below}, {reference.depth, reference.width})) << ")";
    }
    msg << " width " << above << " (ratio "
        << format_ratio(cost_ratio({depth, above}, {reference.depth, reference.width})) << ")";
    throw DomainError(msg.str());
  }
  std::stable_sort(out.begin(), out.end(), [](const PlannedConfig& a, const PlannedConfig& b) {
    const double da = std::abs(a.cost_ratio - 1.0), db = std::abs(b.cost_ratio - 1.0);
    if (da != db) return da < db;
    return a.width < b.width;
  });
  return out;
}

std::string format_plan_table(const std::vector<PlannedConfig>& rows) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-8s %-8s %-18s %-18s %-14s %s\n", "Depth", "Width",
                "#Attention Heads", "Computation Cost", "Params", "FLOPs/token");
  os << line;
  for (const auto& r : rows) {
    const std::string cost = format_cost(r.cost_ratio) + "x";
    std::snprintf(line, sizeof(line), "%-8zu %-8zu %-18zu %-18s %-14zu %llu\n", r.depth, r.width,
                  r.heads, cost.c_str(), r.param_count,
                  static_cast<unsigned long long>(r.flops_per_token));
    os << line;
  }
  return os.str();
}

std::string plan_csv(const std::vector<PlannedConfig>& rows) {
  std::ostringstream os;
  os << "depth,width,heads,cost_ratio,cost_rounded,param_count,flops_per_token\n";
  for (const auto& r : rows) {
    os << r.depth << ',' << r.width << ',' << r.heads << ',' << format_ratio(r.cost_ratio) << ','
       << format_cost(r.cost_ratio) << ',' << r.param_count << ',' << r.flops_per_token << '\n';
  }
  return os.str();
}

ModelConfig planned_model(const ModelConfig& base, const PlannedConfig& plan) {
  ModelConfig m = base;
  m.depth = plan.depth;
  m.width = plan.width;
  m.heads = plan.heads;
  m.validate();
  return m;
}

}  // namespace bamboo

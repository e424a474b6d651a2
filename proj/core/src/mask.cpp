#include "bamboo/mask.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace bamboo {

std::size_t mask_count(std::size_t maskable, double ratio) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(maskable)));
}

MaskPlan sample_mask(std::size_t maskable, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw DomainError("sample_mask: ratio must lie in (0, 1]");
  const std::size_t count = mask_count(maskable, ratio);
  if (count == 0) throw DomainError("empty mask");
  if (count == maskable) {
    std::cerr << "warning: mask ratio " << ratio
              << " masks every position; no visible context remains\n";
  }
  // partial Fisher-Yates over the index range
  std::vector<std::size_t> order(maskable);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = static_cast<std::size_t>(rng.integer(i, maskable - 1));
    std::swap(order[i], order[j]);
  }
  MaskPlan plan;
  plan.ratio = ratio;
  plan.positions.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(plan.positions.begin(), plan.positions.end());
  return plan;
}

void validate_mask(const MaskPlan& mask, std::size_t maskable) {
  for (std::size_t i = 0; i < mask.positions.size(); ++i) {
    if (mask.positions[i] >= maskable) {
      throw DomainError("mask position " + std::to_string(mask.positions[i]) +
                        " out of range " + std::to_string(maskable));
    }
    if (i > 0 && mask.positions[i] <= mask.positions[i - 1]) {
      throw DomainError("mask positions must be sorted and unique");
    }
  }
}

}  // namespace bamboo

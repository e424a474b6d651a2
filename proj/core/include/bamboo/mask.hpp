#pragma once

#include <cstddef>
#include <vector>

#include "bamboo/random.hpp"

namespace bamboo {

// Masked token positions, indexed over data tokens [0, T). A CLS token is
// never part of this index space, so it can never be masked.
struct MaskPlan {
  std::vector<std::size_t> positions;  // sorted, unique
  double ratio = 0.0;

  std::size_t count() const { return positions.size(); }
};

// Number of positions a ratio selects: round(ratio * maskable).
std::size_t mask_count(std::size_t maskable, double ratio);

// Uniform sample without replacement. Throws DomainError("empty mask") when
// the rounded count is zero. ratio == 1 masks everything and logs a warning.
MaskPlan sample_mask(std::size_t maskable, double ratio, Rng& rng);

// Checks sortedness, uniqueness and range.
void validate_mask(const MaskPlan& mask, std::size_t maskable);

}  // namespace bamboo

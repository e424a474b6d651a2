#pragma once

#include <filesystem>
#include <utility>

#include "bamboo/model.hpp"

namespace bamboo {

// Parameter file layout, all little-endian:
//   "BMB1"
//   u32 depth, width, heads, seq_len, patch_dim, num_classes, ffn_mult
//   u8  norm (0 pre, 1 post), residual, activation (0 relu, 1 gelu),
//       head_mode (0 cls, 1 mean_pool), use_cls_token, final_norm
//   f64 norm_eps
//   f32 tensors in declaration order, row-major
template <typename T>
void save_parameters(const std::filesystem::path& path, const ModelConfig& config,
                     const Parameters<T>& params);

template <typename T>
std::pair<ModelConfig, Parameters<T>> load_parameters(const std::filesystem::path& path);

}  // namespace bamboo

#include "bamboo/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace bamboo {
namespace {

static_assert(std::endian::native == std::endian::little, "serializer assumes little-endian");

constexpr std::array<char, 4> kMagic{'B', 'M', 'B', '1'};

template <typename V>
void put(std::ofstream& out, V value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V get(std::ifstream& in, const std::filesystem::path& path) {
  V value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(V))) {
    throw Error("truncated parameter file " + path.string());
  }
  return value;
}

}  // namespace

template <typename T>
void save_parameters(const std::filesystem::path& path, const ModelConfig& config,
                     const Parameters<T>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kMagic.data(), kMagic.size());
  for (std::size_t v : {config.depth, config.width, config.heads, config.seq_len, config.patch_dim,
                        config.num_classes, config.ffn_mult}) {
    put(out, static_cast<std::uint32_t>(v));
  }
  put(out, static_cast<std::uint8_t>(config.norm == NormPlacement::post));
  put(out, static_cast<std::uint8_t>(config.residual));
  put(out, static_cast<std::uint8_t>(config.activation == Activation::gelu));
  put(out, static_cast<std::uint8_t>(config.head_mode == HeadMode::mean_pool));
  put(out, static_cast<std::uint8_t>(config.use_cls_token));
  put(out, static_cast<std::uint8_t>(config.final_norm));
  put(out, config.norm_eps);
  params.for_each([&out](std::string_view, const Matrix<T>& m) {
    for (T v : m.data()) put(out, static_cast<float>(v));
  });
  if (!out) throw Error("write failed for " + path.string());
}

template <typename T>
std::pair<ModelConfig, Parameters<T>> load_parameters(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw Error(path.string() + " is not a BMB1 parameter file");

  ModelConfig config;
  for (std::size_t* field : {&config.depth, &config.width, &config.heads, &config.seq_len,
                             &config.patch_dim, &config.num_classes, &config.ffn_mult}) {
    *field = get<std::uint32_t>(in, path);
  }
  config.norm = get<std::uint8_t>(in, path) ? NormPlacement::post : NormPlacement::pre;
  config.residual = get<std::uint8_t>(in, path) != 0;
  config.activation = get<std::uint8_t>(in, path) ? Activation::gelu : Activation::relu;
  config.head_mode = get<std::uint8_t>(in, path) ? HeadMode::mean_pool : HeadMode::cls;
  config.use_cls_token = get<std::uint8_t>(in, path) != 0;
  config.final_norm = get<std::uint8_t>(in, path) != 0;
  config.norm_eps = get<double>(in, path);
  config.validate();

  // shapes come from a fresh build; values are overwritten below
  Parameters<T> params = build<T>(config, 0);
  params.for_each([&](std::string_view, Matrix<T>& m) {
    for (auto& v : m.data()) v = static_cast<T>(get<float>(in, path));
  });
  if (in.peek() != std::ifstream::traits_type::eof()) {
    throw Error("trailing bytes in parameter file " + path.string());
  }
  return {config, std::move(params)};
}

template void save_parameters(const std::filesystem::path&, const ModelConfig&,
                              const Parameters<float>&);
template void save_parameters(const std::filesystem::path&, const ModelConfig&,
                              const Parameters<double>&);
template std::pair<ModelConfig, Parameters<float>> load_parameters<float>(
    const std::filesystem::path&);
template std::pair<ModelConfig, Parameters<double>> load_parameters<double>(
    const std::filesystem::path&);

}  // namespace bamboo

#include "bamboo/model.hpp"

#include <cmath>
#include <numeric>

#include "bamboo/random.hpp"

namespace bamboo {

NormPlacement parse_norm_placement(const std::string& name) {
  if (name == "pre") return NormPlacement::pre;
  if (name == "post") return NormPlacement::post;
  throw ConfigError("unknown norm placement '" + name + "' (expected pre or post)");
}

HeadMode parse_head_mode(const std::string& name) {
  if (name == "cls") return HeadMode::cls;
  if (name == "mean_pool") return HeadMode::mean_pool;
  throw ConfigError("unknown head mode '" + name + "' (expected cls or mean_pool)");
}

std::string to_string(NormPlacement placement) {
  return placement == NormPlacement::pre ? "pre" : "post";
}

std::string to_string(HeadMode mode) { return mode == HeadMode::cls ? "cls" : "mean_pool"; }

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
  if (depth < 1) fail("depth must be >= 1");
  if (seq_len < 2) fail("seq_len must be >= 2");
  if (heads < 1) fail("heads must be >= 1");
  if (width < heads) fail("width must be >= heads");
  if (width % heads != 0) {
    fail("width " + std::to_string(width) + " is not divisible by heads " + std::to_string(heads));
  }
  if (patch_dim < 1) fail("patch_dim must be >= 1");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (head_mode == HeadMode::cls && !use_cls_token) fail("head_mode cls requires use_cls_token");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
}

template <typename T>
std::size_t parameter_total(const Parameters<T>& params) {
  std::size_t total = 0;
  params.for_each([&total](std::string_view, const Matrix<T>& m) { total += m.size(); });
  return total;
}

template <typename T>
Parameters<T> build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.width, p = config.patch_dim, f = config.ffn_width();
  Rng rng(seed);
  auto ones = [](std::size_t n) { return Matrix<T>(1, n, T{1}); };
  auto zeros = [](std::size_t n) { return Matrix<T>(1, n); };

  Parameters<T> params;
  params.has_cls_token = config.use_cls_token;
  params.has_final_norm = config.final_norm;
  params.patch_embed = xavier_uniform<T>(p, d, rng);
  params.patch_bias = zeros(d);
  params.pos_embed = gaussian<T>(config.sequence_rows(), d, 0.02, rng);
  if (config.use_cls_token) params.cls_token = gaussian<T>(1, d, 0.02, rng);
  params.mask_token = zeros(d);
  params.blocks.resize(config.depth);
  for (auto& b : params.blocks) {
    b.norm1_gain = ones(d);
    b.norm1_bias = zeros(d);
    b.query = xavier_uniform<T>(d, d, rng);
    b.query_bias = zeros(d);
    b.key = xavier_uniform<T>(d, d, rng);
    b.key_bias = zeros(d);
    b.value = xavier_uniform<T>(d, d, rng);
    b.value_bias = zeros(d);
    b.proj = xavier_uniform<T>(d, d, rng);
    b.proj_bias = zeros(d);
    b.norm2_gain = ones(d);
    b.norm2_bias = zeros(d);
    b.ffn_in = xavier_uniform<T>(d, f, rng);
    b.ffn_in_bias = zeros(f);
    b.ffn_out = xavier_uniform<T>(f, d, rng);
    b.ffn_out_bias = zeros(d);
  }
  if (config.final_norm) {
    params.final_norm_gain = ones(d);
    params.final_norm_bias = zeros(d);
  }
  params.classifier = xavier_uniform<T>(d, config.num_classes, rng);
  params.classifier_bias = zeros(config.num_classes);
  params.reconstruction = xavier_uniform<T>(d, p, rng);
  params.reconstruction_bias = zeros(p);
  return params;
}

template <typename T>
Parameters<T> zeros_like(const Parameters<T>& params) {
  Parameters<T> out = params;
  out.for_each([](std::string_view, Matrix<T>& m) { m.fill(T{0}); });
  return out;
}

template <typename To, typename From>
Parameters<To> cast_parameters(const Parameters<From>& params) {
  Parameters<To> out;
  out.has_cls_token = params.has_cls_token;
  out.has_final_norm = params.has_final_norm;
  out.blocks.resize(params.blocks.size());
  std::vector<const Matrix<From>*> src;
  params.for_each([&src](std::string_view, const Matrix<From>& m) { src.push_back(&m); });
  std::size_t i = 0;
  out.for_each([&](std::string_view, Matrix<To>& m) { m = src[i++]->template cast<To>(); });
  return out;
}

template <typename T>
ModelWeights<Var<T>> place_on_tape(Tape<T>& tape, const Parameters<T>& params,
                                   bool requires_grad) {
  ModelWeights<Var<T>> w;
  w.has_cls_token = params.has_cls_token;
  w.has_final_norm = params.has_final_norm;
  w.blocks.resize(params.blocks.size());
  std::vector<const Matrix<T>*> src;
  params.for_each([&src](std::string_view, const Matrix<T>& m) { src.push_back(&m); });
  std::size_t i = 0;
  w.for_each([&](std::string_view, Var<T>& v) { v = tape.leaf(*src[i++], requires_grad); });
  return w;
}

template <typename T>
std::pair<Var<T>, Var<T>> attention(Var<T> q, Var<T> k, Var<T> v) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw ShapeError("attention: q " + q.value().shape_string() + ", k " +
                     k.value().shape_string() + ", v " + v.value().shape_string());
  }
  const T factor = T{1} / std::sqrt(static_cast<T>(q.cols()));
  Var<T> weights = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), factor));
  return {ad::matmul(weights, v), weights};
}

template <typename T>
AttentionResult<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v) {
  Tape<T> tape;
  auto [out, weights] = attention(tape.constant(q), tape.constant(k), tape.constant(v));
  return {out.value(), weights.value()};
}

namespace {

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return ad::add_row(ad::matmul(x, weight), bias);
}

template <typename T>
Var<T> self_attention(Var<T> x, const BlockWeights<Var<T>>& b, const ModelConfig& config) {
  Var<T> q = linear(x, b.query, b.query_bias);
  Var<T> k = linear(x, b.key, b.key_bias);
  Var<T> v = linear(x, b.value, b.value_bias);
  const std::size_t dh = config.head_dim();
  std::vector<Var<T>> heads;
  heads.reserve(config.heads);
  for (std::size_t h = 0; h < config.heads; ++h) {
    auto [out, weights] = attention(ad::slice_cols(q, h * dh, dh), ad::slice_cols(k, h * dh, dh),
                                    ad::slice_cols(v, h * dh, dh));
    heads.push_back(out);
  }
  Var<T> merged = config.heads == 1 ? heads[0] : ad::concat_cols<T>(heads);
  return linear(merged, b.proj, b.proj_bias);
}

template <typename T>
Var<T> feed_forward(Var<T> x, const BlockWeights<Var<T>>& b, const ModelConfig& config) {
  return linear(ad::activate(linear(x, b.ffn_in, b.ffn_in_bias), config.activation), b.ffn_out,
                b.ffn_out_bias);
}

// Returns (h^{l+1}, g(h^l)).
template <typename T>
std::pair<Var<T>, Var<T>> block_forward(Var<T> h, const BlockWeights<Var<T>>& b,
                                        const ModelConfig& config) {
  const T eps = static_cast<T>(config.norm_eps);
  if (config.norm == NormPlacement::pre) {
    Var<T> attn = self_attention(ad::layer_norm(h, b.norm1_gain, b.norm1_bias, eps), b, config);
    Var<T> mid = config.residual ? ad::add(h, attn) : attn;
    Var<T> ffn = feed_forward(ad::layer_norm(mid, b.norm2_gain, b.norm2_bias, eps), b, config);
    Var<T> out = config.residual ? ad::add(mid, ffn) : ffn;
    return {out, ad::add(attn, ffn)};
  }
  Var<T> attn = self_attention(h, b, config);
  Var<T> mid = ad::layer_norm(config.residual ? ad::add(h, attn) : attn, b.norm1_gain,
                              b.norm1_bias, eps);
  Var<T> ffn = feed_forward(mid, b, config);
  Var<T> out = ad::layer_norm(config.residual ? ad::add(mid, ffn) : ffn, b.norm2_gain,
                              b.norm2_bias, eps);
  return {out, ad::add(attn, ffn)};
}

template <typename T>
Var<T> head_input(Var<T> final_layer, const ModelWeights<Var<T>>& w, const ModelConfig& config) {
  if (!config.final_norm) return final_layer;
  if (!w.has_final_norm) throw ShapeError("final_norm set but parameters carry no final norm");
  return ad::layer_norm(final_layer, w.final_norm_gain, w.final_norm_bias,
                        static_cast<T>(config.norm_eps));
}

template <typename T>
Var<T> classify_rows(Var<T> final_layer, const ModelWeights<Var<T>>& w, const ModelConfig& config,
                     HeadMode mode) {
  final_layer = head_input(final_layer, w, config);
  Var<T> pooled;
  if (mode == HeadMode::cls) {
    if (!config.use_cls_token) throw ConfigError("cls head mode requires a CLS token");
    const std::size_t first = 0;
    pooled = ad::gather_rows(final_layer, std::span<const std::size_t>(&first, 1));
  } else {
    std::vector<std::size_t> rows(config.seq_len);
    std::iota(rows.begin(), rows.end(), config.first_data_row());
    pooled = ad::mean_rows<T>(final_layer, rows);
  }
  return linear(pooled, w.classifier, w.classifier_bias);
}

template <typename T>
Var<T> reconstruct_rows(Var<T> final_layer, const ModelWeights<Var<T>>& w,
                        const ModelConfig& config, std::span<const std::size_t> masked) {
  if (masked.empty()) throw DomainError("empty mask");
  final_layer = head_input(final_layer, w, config);
  std::vector<std::size_t> rows(masked.begin(), masked.end());
  for (auto& r : rows) r += config.first_data_row();
  return linear(ad::gather_rows<T>(final_layer, rows), w.reconstruction, w.reconstruction_bias);
}

void check_positions(std::span<const std::size_t> masked, std::size_t limit) {
  MaskPlan probe;
  probe.positions.assign(masked.begin(), masked.end());
  validate_mask(probe, limit);
}

}  // namespace

template <typename T>
GraphOutputs<T> forward_graph(Tape<T>& tape, const ModelWeights<Var<T>>& w,
                              const ModelConfig& config, const Matrix<T>& tokens,
                              std::span<const std::size_t> masked, HeadKind head) {
  config.validate();
  if (tokens.rows() != config.seq_len || tokens.cols() != config.patch_dim) {
    throw ShapeError("forward: tokens " + tokens.shape_string() + " do not match seq_len " +
                     std::to_string(config.seq_len) + " x patch_dim " +
                     std::to_string(config.patch_dim));
  }
  if (w.blocks.size() != config.depth) throw ShapeError("forward: parameter depth mismatch");
  check_positions(masked, config.seq_len);
  if (head == HeadKind::reconstruct && masked.empty()) throw DomainError("empty mask");
  if (head == HeadKind::classify && !masked.empty()) {
    throw DomainError("forward: a mask was supplied to the classifier head");
  }

  GraphOutputs<T> g;
  Var<T> embedded = linear(tape.constant(tokens), w.patch_embed, w.patch_bias);
  if (!masked.empty()) embedded = ad::replace_rows(embedded, w.mask_token, masked);
  if (config.use_cls_token) embedded = ad::prepend_row(w.cls_token, embedded);
  Var<T> h = ad::add(embedded, w.pos_embed);
  g.layers.push_back(h);
  for (const auto& block : w.blocks) {
    auto [next, branch] = block_forward(h, block, config);
    g.block_outputs.push_back(branch);
    g.layers.push_back(next);
    h = next;
  }
  g.output = head == HeadKind::classify ? classify_rows(h, w, config, config.head_mode)
                                        : reconstruct_rows(h, w, config, masked);
  return g;
}

template <typename T>
ForwardResult<T> forward(const Parameters<T>& params, const ModelConfig& config,
                         const Matrix<T>& tokens, const MaskPlan* mask, HeadKind head,
                         bool capture) {
  Tape<T> tape;
  const auto weights = place_on_tape(tape, params, false);
  std::span<const std::size_t> masked;
  if (mask) masked = mask->positions;
  auto g = forward_graph(tape, weights, config, tokens, masked, head);

  ForwardResult<T> result{g.output.value(), std::nullopt};
  if (capture) {
    ActivationTrace trace;
    for (const auto& v : g.layers) trace.layers.push_back(v.value().template cast<double>());
    for (const auto& v : g.block_outputs) {
      trace.block_outputs.push_back(v.value().template cast<double>());
    }
    trace.masked.assign(config.sequence_rows(), false);
    trace.special.assign(config.sequence_rows(), false);
    for (auto p : masked) trace.masked[p + config.first_data_row()] = true;
    if (config.use_cls_token) trace.special[0] = true;
    result.trace = std::move(trace);
  }
  return result;
}

template <typename T>
ForwardResult<T> forward(const Parameters<T>& params, const ModelConfig& config,
                         const Matrix<T>& tokens, const MaskPlan* mask, bool capture) {
  const HeadKind head = mask ? HeadKind::reconstruct : HeadKind::classify;
  return forward(params, config, tokens, mask, head, capture);
}

template <typename T>
Matrix<T> classification_head(const Parameters<T>& params, const ModelConfig& config,
                              const Matrix<T>& final_layer, HeadMode mode) {
  if (final_layer.rows() != config.sequence_rows() || final_layer.cols() != config.width) {
    throw ShapeError("classification_head: hidden state " + final_layer.shape_string());
  }
  Tape<T> tape;
  const auto weights = place_on_tape(tape, params, false);
  return classify_rows(tape.constant(final_layer), weights, config, mode).value();
}

template <typename T>
Matrix<T> reconstruction_head(const Parameters<T>& params, const ModelConfig& config,
                              const Matrix<T>& final_layer, const MaskPlan& mask) {
  if (final_layer.rows() != config.sequence_rows() || final_layer.cols() != config.width) {
    throw ShapeError("reconstruction_head: hidden state " + final_layer.shape_string());
  }
  check_positions(mask.positions, config.seq_len);
  Tape<T> tape;
  const auto weights = place_on_tape(tape, params, false);
  return reconstruct_rows<T>(tape.constant(final_layer), weights, config, mask.positions).value();
}

#define BAMBOO_INSTANTIATE(T)                                                                  \
  template std::size_t parameter_total(const Parameters<T>&);                                  \
  template Parameters<T> build<T>(const ModelConfig&, std::uint64_t);                          \
  template Parameters<T> zeros_like(const Parameters<T>&);                                     \
  template ModelWeights<Var<T>> place_on_tape(Tape<T>&, const Parameters<T>&, bool);           \
  template GraphOutputs<T> forward_graph(Tape<T>&, const ModelWeights<Var<T>>&,                \
                                         const ModelConfig&, const Matrix<T>&,                 \
                                         std::span<const std::size_t>, HeadKind);              \
  template AttentionResult<T> attention(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&); \
  template std::pair<Var<T>, Var<T>> attention(Var<T>, Var<T>, Var<T>);                        \
  template ForwardResult<T> forward(const Parameters<T>&, const ModelConfig&,                  \
                                    const Matrix<T>&, const MaskPlan*, HeadKind, bool);        \
  template ForwardResult<T> forward(const Parameters<T>&, const ModelConfig&,                  \
                                    const Matrix<T>&, const MaskPlan*, bool);                  \
  template Matrix<T> classification_head(const Parameters<T>&, const ModelConfig&,             \
                                         const Matrix<T>&, HeadMode);                          \
  template Matrix<T> reconstruction_head(const Parameters<T>&, const ModelConfig&,             \
                                         const Matrix<T>&, const MaskPlan&);

BAMBOO_INSTANTIATE(float)
BAMBOO_INSTANTIATE(double)
BAMBOO_INSTANTIATE(long double)

#undef BAMBOO_INSTANTIATE

template Parameters<float> cast_parameters<float, double>(const Parameters<double>&);
template Parameters<double> cast_parameters<double, float>(const Parameters<float>&);
template Parameters<float> cast_parameters<float, float>(const Parameters<float>&);
template Parameters<double> cast_parameters<double, double>(const Parameters<double>&);
template Parameters<long double> cast_parameters<long double, double>(const Parameters<double>&);

}  // namespace bamboo

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bamboo/autodiff.hpp"
#include "bamboo/mask.hpp"

namespace bamboo {

enum class NormPlacement { pre, post };
enum class HeadMode { cls, mean_pool };
// Which output head a forward pass ends in.
enum class HeadKind { classify, reconstruct };

NormPlacement parse_norm_placement(const std::string& name);
HeadMode parse_head_mode(const std::string& name);
std::string to_string(NormPlacement placement);
std::string to_string(HeadMode mode);

struct ModelConfig {
  std::size_t depth = 4;        // transformer blocks L
  std::size_t width = 64;       // hidden dimension d
  std::size_t heads = 4;        // attention heads H
  std::size_t seq_len = 16;     // data tokens T (CLS excluded)
  std::size_t patch_dim = 16;   // input token dimensionality p
  std::size_t num_classes = 4;  // classifier outputs C
  std::size_t ffn_mult = 4;
  NormPlacement norm = NormPlacement::pre;
  bool residual = true;
  Activation activation = Activation::gelu;
  HeadMode head_mode = HeadMode::mean_pool;
  bool use_cls_token = false;
  bool final_norm = false;  // LayerNorm on h^L ahead of both heads
  double norm_eps = 1e-5;

  // Throws ConfigError on any violated invariant.
  void validate() const;

  std::size_t head_dim() const { return width / heads; }
  std::size_t ffn_width() const { return ffn_mult * width; }
  // Rows of the hidden state: data tokens plus the optional CLS row 0.
  std::size_t sequence_rows() const { return seq_len + (use_cls_token ? 1 : 0); }
  std::size_t first_data_row() const { return use_cls_token ? 1 : 0; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename M>
struct BlockWeights {
  M norm1_gain, norm1_bias;
  M query, query_bias, key, key_bias, value, value_bias, proj, proj_bias;
  M norm2_gain, norm2_bias;
  M ffn_in, ffn_in_bias, ffn_out, ffn_out_bias;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("norm1_gain", self.norm1_gain);
    f("norm1_bias", self.norm1_bias);
    f("query", self.query);
    f("query_bias", self.query_bias);
    f("key", self.key);
    f("key_bias", self.key_bias);
    f("value", self.value);
    f("value_bias", self.value_bias);
    f("proj", self.proj);
    f("proj_bias", self.proj_bias);
    f("norm2_gain", self.norm2_gain);
    f("norm2_bias", self.norm2_bias);
    f("ffn_in", self.ffn_in);
    f("ffn_in_bias", self.ffn_in_bias);
    f("ffn_out", self.ffn_out);
    f("ffn_out_bias", self.ffn_out_bias);
  }
};

// Full learnable state, generic over the tensor representation so that the
// same layout serves stored parameters, gradients, optimizer moments and
// tape handles.
template <typename M>
struct ModelWeights {
  M patch_embed, patch_bias;
  M pos_embed;
  M cls_token;  // present only when has_cls_token
  M mask_token;
  std::vector<BlockWeights<M>> blocks;
  M final_norm_gain, final_norm_bias;  // present only when has_final_norm
  M classifier, classifier_bias;
  M reconstruction, reconstruction_bias;
  bool has_cls_token = false;
  bool has_final_norm = false;

  // Calls f(name, tensor) in declaration order.
  template <typename F>
  void for_each(F&& f) {
    visit_all(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit_all(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_all(Self& self, F& f) {
    f(std::string_view("patch_embed"), self.patch_embed);
    f(std::string_view("patch_bias"), self.patch_bias);
    f(std::string_view("pos_embed"), self.pos_embed);
    if (self.has_cls_token) f(std::string_view("cls_token"), self.cls_token);
    f(std::string_view("mask_token"), self.mask_token);
    for (auto& block : self.blocks) {
      BlockWeights<M>::visit(block, [&f](const char* name, auto& m) { f(std::string_view(name), m); });
    }
    if (self.has_final_norm) {
      f(std::string_view("final_norm_gain"), self.final_norm_gain);
      f(std::string_view("final_norm_bias"), self.final_norm_bias);
    }
    f(std::string_view("classifier"), self.classifier);
    f(std::string_view("classifier_bias"), self.classifier_bias);
    f(std::string_view("reconstruction"), self.reconstruction);
    f(std::string_view("reconstruction_bias"), self.reconstruction_bias);
  }
};

template <typename T>
using Parameters = ModelWeights<Matrix<T>>;

template <typename T>
std::size_t parameter_total(const Parameters<T>& params);

// Deterministic initialization: Xavier-uniform projections, N(0, 0.02²)
// positional embeddings and CLS token, zero biases, unit norm gains, zero
// mask token.
template <typename T>
Parameters<T> build(const ModelConfig& config, std::uint64_t seed);

// Zero tensors shaped like `params`.
template <typename T>
Parameters<T> zeros_like(const Parameters<T>& params);

template <typename To, typename From>
Parameters<To> cast_parameters(const Parameters<From>& params);

// Per-layer hidden states of one forward pass. Always stored in 64-bit.
struct ActivationTrace {
  std::vector<Matrix<double>> layers;         // h^0 (embedded input) .. h^L
  std::vector<Matrix<double>> block_outputs;  // g(h^l): summed branch outputs before residual
  std::vector<bool> masked;                   // per hidden row
  std::vector<bool> special;                  // per hidden row (CLS)

  std::size_t depth() const { return block_outputs.size(); }
};

// Hidden states of a graph built on a tape.
template <typename T>
struct GraphOutputs {
  Var<T> output;
  std::vector<Var<T>> layers;
  std::vector<Var<T>> block_outputs;
};

template <typename T>
ModelWeights<Var<T>> place_on_tape(Tape<T>& tape, const Parameters<T>& params,
                                   bool requires_grad);

// Differentiable forward pass. `masked` indexes data tokens and must be
// non-empty for HeadKind::reconstruct and empty for HeadKind::classify.
template <typename T>
GraphOutputs<T> forward_graph(Tape<T>& tape, const ModelWeights<Var<T>>& weights,
                              const ModelConfig& config, const Matrix<T>& tokens,
                              std::span<const std::size_t> masked, HeadKind head);

template <typename T>
struct AttentionResult {
  Matrix<T> output;
  Matrix<T> weights;
};

// Scaled dot-product attention for one head, scale 1/sqrt(d_h).
template <typename T>
AttentionResult<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v);

template <typename T>
std::pair<Var<T>, Var<T>> attention(Var<T> q, Var<T> k, Var<T> v);

template <typename T>
struct ForwardResult {
  Matrix<T> output;  // logits [1×C] or reconstructions [|mask|×p]
  std::optional<ActivationTrace> trace;
};

// Pure forward pass. A mask selects the reconstruction head; no mask selects
// the classifier head.
template <typename T>
ForwardResult<T> forward(const Parameters<T>& params, const ModelConfig& config,
                         const Matrix<T>& tokens, const MaskPlan* mask, bool capture);

// Explicit head selection; classify with a mask is rejected.
template <typename T>
ForwardResult<T> forward(const Parameters<T>& params, const ModelConfig& config,
                         const Matrix<T>& tokens, const MaskPlan* mask, HeadKind head,
                         bool capture);

// Classifier head on a final-layer hidden state [rows×d].
template <typename T>
Matrix<T> classification_head(const Parameters<T>& params, const ModelConfig& config,
                              const Matrix<T>& final_layer, HeadMode mode);

// Reconstruction head on the masked rows of a final-layer hidden state.
template <typename T>
Matrix<T> reconstruction_head(const Parameters<T>& params, const ModelConfig& config,
                              const Matrix<T>& final_layer, const MaskPlan& mask);

}  // namespace bamboo

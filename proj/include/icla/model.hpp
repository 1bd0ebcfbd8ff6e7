#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "icla/numerics.hpp"

namespace icla {

struct ModelConfig {
  int num_layers = 8;
  int hidden_dim = 64;
  int num_heads = 4;
  int mlp_dim = 256;
  int vocab_size = 64;
  int max_seq_len = 128;

  int head_dim() const { return hidden_dim / num_heads; }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  Tensor attn_norm;  // [d]
  Tensor w_q;        // [d x d]
  Tensor w_k;        // [d x d]
  Tensor w_v;        // [d x d]
  Tensor w_o;        // [d x d]
  Tensor mlp_norm;   // [d]
  Tensor w_up;       // [d x mlp]
  Tensor w_down;     // [mlp x d]
};

struct TransformerParams {
  ModelConfig config;
  Tensor embedding;  // [V x d]
  std::vector<LayerParams> layers;
  Tensor w_out;  // [d x V]

  /// Weights ~ N(0, 0.02^2), norm gains 1.
  static TransformerParams init(const ModelConfig& cfg, SeededRng& rng);
  /// All weights zero, norm gains 1.
  static TransformerParams zeros(const ModelConfig& cfg);

  /// Stable (name, tensor) listing; this order is the checkpoint order.
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
};

/// Token ids; 1 <= length <= max_seq_len when fed to the model.
using TokenSequence = std::vector<int>;

void validate_sequence(const ModelConfig& cfg, const TokenSequence& seq);

/// Sinusoidal position table [T x d].
Tensor position_encoding(std::size_t length, std::size_t dim);

Tensor embed(const TransformerParams& params, const TokenSequence& seq);

/// Intermediates of one layer, retained for the backward pass.
struct LayerActivations {
  Tensor input;
  Tensor attn_in;  // rms_norm(input)
  std::vector<double> attn_inv_rms;
  Tensor q, k, v;
  std::vector<Tensor> probs;  // per head [T x T], zero above the diagonal
  Tensor context;             // concatenated head outputs [T x d]
  Tensor mid;                 // input + attention output
  Tensor mlp_in;              // rms_norm(mid)
  std::vector<double> mlp_inv_rms;
  Tensor pre_act;  // [T x mlp]
  Tensor act;      // gelu(pre_act)
};

double gelu(double x);
double gelu_grad(double x);

/// h_l = f_l(h_{l-1}) + h_{l-1}; `layer` is 1-based.
Tensor layer_forward(const TransformerParams& params, int layer, const Tensor& h_prev,
                     LayerActivations* acts = nullptr);

/// Gradients of one layer's weights.
struct LayerGrads {
  Tensor attn_norm, w_q, w_k, w_v, w_o, mlp_norm, w_up, w_down;
  static LayerGrads zeros_like(const LayerParams& p);
};

/// Backpropagates d(out) to d(h_prev). Weight gradients accumulate into `grads` when given.
Tensor layer_backward(const TransformerParams& params, int layer, const LayerActivations& acts,
                      const Tensor& d_out, LayerGrads* grads = nullptr);

Tensor logits(const TransformerParams& params, const Tensor& h_final);

struct ForwardResult {
  std::vector<Tensor> hidden;  // h^0 .. h^L
  Tensor logits;               // [T x V]
};

ForwardResult forward_vanilla(const TransformerParams& params, const TokenSequence& seq,
                              std::vector<LayerActivations>* acts = nullptr);

/// Maps a sequence to its [T x V] logits.
using LogitsFn = std::function<Tensor(const TokenSequence&)>;

/// Index of the largest entry; ties go to the lowest index.
int argmax(std::span<const double> row);

/// Appends argmax tokens, recomputing the full prefix every step.
TokenSequence greedy_decode(const LogitsFn& logits_fn, int max_seq_len,
                            const TokenSequence& prompt, int max_new);
TokenSequence greedy_decode(const TransformerParams& params, const TokenSequence& prompt,
                            int max_new);

}  // namespace icla

#include "icla/model.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace icla {

namespace {

constexpr double kInitStd = 0.02;

void require(bool ok, const std::string& message) {
  if (!ok) {
    throw std::invalid_argument(message);
  }
}

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

}  // namespace

void ModelConfig::validate() const {
  require(num_layers >= 2, "model.num_layers must be >= 2");
  require(hidden_dim >= 1, "model.hidden_dim must be >= 1");
  require(num_heads >= 1, "model.num_heads must be >= 1");
  require(hidden_dim % num_heads == 0, "model.num_heads must divide model.hidden_dim");
  require(mlp_dim >= 1, "model.mlp_dim must be >= 1");
  require(vocab_size >= 1, "model.vocab_size must be >= 1");
  require(max_seq_len >= 1, "model.max_seq_len must be >= 1");
}

TransformerParams TransformerParams::init(const ModelConfig& cfg, SeededRng& rng) {
  cfg.validate();
  const std::size_t d = sz(cfg.hidden_dim), m = sz(cfg.mlp_dim), v = sz(cfg.vocab_size);
  TransformerParams p;
  p.config = cfg;
  p.embedding = rand_normal(rng, {v, d}, kInitStd);
  for (int l = 0; l < cfg.num_layers; ++l) {
    LayerParams lp;
    lp.attn_norm = Tensor::filled({d}, 1.0);
    lp.w_q = rand_normal(rng, {d, d}, kInitStd);
    lp.w_k = rand_normal(rng, {d, d}, kInitStd);
    lp.w_v = rand_normal(rng, {d, d}, kInitStd);
    lp.w_o = rand_normal(rng, {d, d}, kInitStd);
    lp.mlp_norm = Tensor::filled({d}, 1.0);
    lp.w_up = rand_normal(rng, {d, m}, kInitStd);
    lp.w_down = rand_normal(rng, {m, d}, kInitStd);
    p.layers.push_back(std::move(lp));
  }
  p.w_out = rand_normal(rng, {d, v}, kInitStd);
  return p;
}

TransformerParams TransformerParams::zeros(const ModelConfig& cfg) {
  SeededRng unused(0);
  TransformerParams p = init(cfg, unused);
  for (auto& [name, t] : p.named_tensors()) {
    if (name.ends_with("_norm")) {
      t->fill(1.0);
    } else {
      t->fill(0.0);
    }
  }
  return p;
}

std::vector<std::pair<std::string, Tensor*>> TransformerParams::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embedding", &embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    LayerParams& lp = layers[l];
    out.emplace_back(pre + "attn_norm", &lp.attn_norm);
    out.emplace_back(pre + "w_q", &lp.w_q);
    out.emplace_back(pre + "w_k", &lp.w_k);
    out.emplace_back(pre + "w_v", &lp.w_v);
    out.emplace_back(pre + "w_o", &lp.w_o);
    out.emplace_back(pre + "mlp_norm", &lp.mlp_norm);
    out.emplace_back(pre + "w_up", &lp.w_up);
    out.emplace_back(pre + "w_down", &lp.w_down);
  }
  out.emplace_back("w_out", &w_out);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> TransformerParams::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<TransformerParams*>(this)->named_tensors()) {
    out.emplace_back(name, t);
  }
  return out;
}

void validate_sequence(const ModelConfig& cfg, const TokenSequence& seq) {
  if (seq.empty() || seq.size() > sz(cfg.max_seq_len)) {
    throw std::invalid_argument("sequence length " + std::to_string(seq.size()) +
                                " outside [1, " + std::to_string(cfg.max_seq_len) + "]");
  }
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (seq[t] < 0 || seq[t] >= cfg.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(seq[t]) + " at position " +
                                  std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(cfg.vocab_size));
    }
  }
}

Tensor position_encoding(std::size_t length, std::size_t dim) {
  Tensor pe({length, dim});
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < dim; ++i) {
      const std::size_t pair = i / 2;
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(dim));
      const double angle = static_cast<double>(t) * freq;
      pe(t, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Tensor embed(const TransformerParams& params, const TokenSequence& seq) {
  validate_sequence(params.config, seq);
  const std::size_t d = sz(params.config.hidden_dim);
  Tensor h = position_encoding(seq.size(), d);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const auto e = params.embedding.row(sz(seq[t]));
    auto r = h.row(t);
    for (std::size_t i = 0; i < d; ++i) {
      r[i] = e[i] + r[i];
    }
  }
  return h;
}

double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double th = std::tanh(c * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

Tensor layer_forward(const TransformerParams& params, int layer, const Tensor& h_prev,
                     LayerActivations* acts) {
  const ModelConfig& cfg = params.config;
  if (layer < 1 || layer > cfg.num_layers) {
    throw std::invalid_argument("layer index " + std::to_string(layer) + " outside [1, " +
                                std::to_string(cfg.num_layers) + "]");
  }
  const std::size_t d = sz(cfg.hidden_dim);
  if (h_prev.rank() != 2 || h_prev.cols() != d) {
    throw std::invalid_argument("layer_forward: hidden state shape " +
                                shape_string(h_prev.shape()) + " expected [T x " +
                                std::to_string(d) + "]");
  }
  const LayerParams& lp = params.layers[sz(layer - 1)];
  const std::size_t T = h_prev.rows();
  const std::size_t heads = sz(cfg.num_heads), hd = sz(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> inv1;
  Tensor n1 = rms_norm_rows(h_prev, lp.attn_norm, kDefaultRmsEps, &inv1);
  Tensor q = matmul(n1, lp.w_q);
  Tensor k = matmul(n1, lp.w_k);
  Tensor v = matmul(n1, lp.w_v);

  Tensor context({T, d});
  std::vector<Tensor> probs;
  probs.reserve(heads);
  std::vector<double> scores;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    Tensor p({T, T});
    for (std::size_t t = 0; t < T; ++t) {
      scores.assign(t + 1, 0.0);
      for (std::size_t s = 0; s <= t; ++s) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hd; ++i) {
          acc += q(t, off + i) * k(s, off + i);
        }
        scores[s] = acc * scale;
      }
      const auto w = softmax(scores);
      for (std::size_t s = 0; s <= t; ++s) {
        p(t, s) = w[s];
        for (std::size_t i = 0; i < hd; ++i) {
          context(t, off + i) += w[s] * v(s, off + i);
        }
      }
    }
    probs.push_back(std::move(p));
  }

  Tensor mid = matmul(context, lp.w_o);
  for (std::size_t i = 0; i < mid.size(); ++i) {
    mid[i] = h_prev[i] + mid[i];
  }
  std::vector<double> inv2;
  Tensor n2 = rms_norm_rows(mid, lp.mlp_norm, kDefaultRmsEps, &inv2);
  Tensor pre = matmul(n2, lp.w_up);
  Tensor act(pre.shape());
  for (std::size_t i = 0; i < pre.size(); ++i) {
    act[i] = gelu(pre[i]);
  }
  Tensor out = matmul(act, lp.w_down);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = mid[i] + out[i];
  }

  if (acts != nullptr) {
    acts->input = h_prev;
    acts->attn_in = std::move(n1);
    acts->attn_inv_rms = std::move(inv1);
    acts->q = std::move(q);
    acts->k = std::move(k);
    acts->v = std::move(v);
    acts->probs = std::move(probs);
    acts->context = std::move(context);
    acts->mid = std::move(mid);
    acts->mlp_in = std::move(n2);
    acts->mlp_inv_rms = std::move(inv2);
    acts->pre_act = std::move(pre);
    acts->act = std::move(act);
  }
  return out;
}

LayerGrads LayerGrads::zeros_like(const LayerParams& p) {
  return {Tensor(p.attn_norm.shape()), Tensor(p.w_q.shape()),      Tensor(p.w_k.shape()),
          Tensor(p.w_v.shape()),       Tensor(p.w_o.shape()),      Tensor(p.mlp_norm.shape()),
          Tensor(p.w_up.shape()),      Tensor(p.w_down.shape())};
}

Tensor layer_backward(const TransformerParams& params, int layer, const LayerActivations& acts,
                      const Tensor& d_out, LayerGrads* grads) {
  const ModelConfig& cfg = params.config;
  const LayerParams& lp = params.layers.at(sz(layer - 1));
  if (!d_out.same_shape(acts.input)) {
    throw std::invalid_argument("layer_backward: gradient shape " + shape_string(d_out.shape()) +
                                " expected " + shape_string(acts.input.shape()));
  }
  const std::size_t T = d_out.rows();
  const std::size_t heads = sz(cfg.num_heads), hd = sz(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // MLP branch.
  if (grads != nullptr) {
    matmul_tn_acc(acts.act, d_out, grads->w_down);
  }
  Tensor d_pre = matmul_nt(d_out, lp.w_down);
  for (std::size_t i = 0; i < d_pre.size(); ++i) {
    d_pre[i] *= gelu_grad(acts.pre_act[i]);
  }
  if (grads != nullptr) {
    matmul_tn_acc(acts.mlp_in, d_pre, grads->w_up);
  }
  Tensor d_n2 = matmul_nt(d_pre, lp.w_up);
  Tensor d_mid = rms_norm_rows_backward(acts.mid, lp.mlp_norm, acts.mlp_inv_rms, d_n2,
                                   grads != nullptr ? &grads->mlp_norm : nullptr);
  add_inplace(d_mid, d_out);

  // Attention branch.
  if (grads != nullptr) {
    matmul_tn_acc(acts.context, d_mid, grads->w_o);
  }
  Tensor d_ctx = matmul_nt(d_mid, lp.w_o);
  Tensor dq(acts.q.shape()), dk(acts.k.shape()), dv(acts.v.shape());
  std::vector<double> dp;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    const Tensor& p = acts.probs[h];
    for (std::size_t t = 0; t < T; ++t) {
      dp.assign(t + 1, 0.0);
      double weighted = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hd; ++i) {
          acc += d_ctx(t, off + i) * acts.v(s, off + i);
          dv(s, off + i) += p(t, s) * d_ctx(t, off + i);
        }
        dp[s] = acc;
        weighted += p(t, s) * acc;
      }
      for (std::size_t s = 0; s <= t; ++s) {
        const double ds = p(t, s) * (dp[s] - weighted) * scale;
        for (std::size_t i = 0; i < hd; ++i) {
          dq(t, off + i) += ds * acts.k(s, off + i);
          dk(s, off + i) += ds * acts.q(t, off + i);
        }
      }
    }
  }
  if (grads != nullptr) {
    matmul_tn_acc(acts.attn_in, dq, grads->w_q);
    matmul_tn_acc(acts.attn_in, dk, grads->w_k);
    matmul_tn_acc(acts.attn_in, dv, grads->w_v);
  }
  Tensor d_n1 = matmul_nt(dq, lp.w_q);
  add_inplace(d_n1, matmul_nt(dk, lp.w_k));
  add_inplace(d_n1, matmul_nt(dv, lp.w_v));
  Tensor d_in = rms_norm_rows_backward(acts.input, lp.attn_norm, acts.attn_inv_rms, d_n1,
                                  grads != nullptr ? &grads->attn_norm : nullptr);
  add_inplace(d_in, d_mid);
  return d_in;
}

Tensor logits(const TransformerParams& params, const Tensor& h_final) {
  if (h_final.rank() != 2 || h_final.cols() != params.w_out.rows()) {
    throw std::invalid_argument("logits: hidden state shape " + shape_string(h_final.shape()) +
                                " incompatible with output projection " +
                                shape_string(params.w_out.shape()));
  }
  return matmul(h_final, params.w_out);
}

ForwardResult forward_vanilla(const TransformerParams& params, const TokenSequence& seq,
                              std::vector<LayerActivations>* acts) {
  const int L = params.config.num_layers;
  ForwardResult out;
  out.hidden.reserve(sz(L + 1));
  out.hidden.push_back(embed(params, seq));
  if (acts != nullptr) {
    acts->assign(sz(L), LayerActivations{});
  }
  for (int l = 1; l <= L; ++l) {
    out.hidden.push_back(layer_forward(params, l, out.hidden.back(),
                                       acts != nullptr ? &(*acts)[sz(l - 1)] : nullptr));
  }
  out.logits = logits(params, out.hidden.back());
  return out;
}

int argmax(std::span<const double> row) {
  if (row.empty()) {
    throw std::invalid_argument("argmax: empty row");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) {
      best = i;
    }
  }
  return static_cast<int>(best);
}

TokenSequence greedy_decode(const LogitsFn& logits_fn, int max_seq_len,
                            const TokenSequence& prompt, int max_new) {
  if (max_new < 0) {
    throw std::invalid_argument("greedy_decode: max_new must be non-negative");
  }
  if (prompt.size() + sz(max_new) > sz(max_seq_len)) {
    throw std::invalid_argument("greedy_decode: prompt length " + std::to_string(prompt.size()) +
                                " + max_new " + std::to_string(max_new) + " exceeds " +
                                std::to_string(max_seq_len));
  }
  TokenSequence seq = prompt;
  for (int step = 0; step < max_new; ++step) {
    const Tensor lg = logits_fn(seq);
    seq.push_back(argmax(lg.row(lg.rows() - 1)));
  }
  return seq;
}

TokenSequence greedy_decode(const TransformerParams& params, const TokenSequence& prompt,
                            int max_new) {
  return greedy_decode(
      [&](const TokenSequence& s) { return forward_vanilla(params, s).logits; },
      params.config.max_seq_len, prompt, max_new);
}

}  // namespace icla

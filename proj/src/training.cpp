#include "icla/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <openssl/evp.h>

namespace icla {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

void check_batch(const Batch& batch) {
  if (batch.examples.empty()) {
    throw std::invalid_argument("empty batch");
  }
}

// Gradient of one cla_attend call. `du` receives the query-state gradient (query plus the
// newest key/value entry); older entries accumulate into `d_cache` (indexed by layer).
void cla_backward(const ClaParams& cla, const IclaTape& tape, int layer, int start_layer,
                  const RefinementRecord& rec, const Tensor& d_out, Tensor& du,
                  std::vector<Tensor>& d_cache, ClaParams& grads) {
  const HiddenStateCache& cache = *tape.cache;
  const Tensor& current = tape.produced[sz(layer)];
  const std::size_t n = sz(layer - start_layer + 1);
  const std::size_t T = current.rows();
  const std::size_t dl = cla.w_q.cols();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dl));

  // Keys/values exactly as seen at this layer: finalized older entries, fresh current entry.
  std::vector<const Tensor*> states(n), keys(n), values(n);
  const Tensor current_key = matmul(current, cla.w_k);
  const Tensor current_value = matmul(current, cla.w_v);
  for (std::size_t k = 0; k + 1 < n; ++k) {
    states[k] = &cache.state(k);
    keys[k] = &cache.key(k);
    values[k] = &cache.value(k);
  }
  states[n - 1] = &current;
  keys[n - 1] = &current_key;
  values[n - 1] = &current_value;

  matmul_tn_acc(rec.cla.latent, d_out, grads.w_out);
  const Tensor d_latent = matmul_nt(d_out, cla.w_out);

  Tensor dq({T, dl});
  std::vector<Tensor> dk(n, Tensor({T, dl})), dv(n, Tensor({T, dl}));
  std::vector<double> da(n);
  for (std::size_t t = 0; t < T; ++t) {
    const auto& w = rec.cla.weights[t];
    const auto dz = d_latent.row(t);
    const auto q = rec.cla.query.row(t);
    double weighted = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const auto val = values[k]->row(t);
      double acc = 0.0;
      for (std::size_t i = 0; i < dl; ++i) {
        acc += dz[i] * val[i];
      }
      da[k] = acc;
      weighted += w[k] * acc;
    }
    auto dqt = dq.row(t);
    for (std::size_t k = 0; k < n; ++k) {
      const double ds = w[k] * (da[k] - weighted) * inv_sqrt;
      const auto key = keys[k]->row(t);
      auto dkt = dk[k].row(t);
      auto dvt = dv[k].row(t);
      for (std::size_t i = 0; i < dl; ++i) {
        dqt[i] += ds * key[i];
        dkt[i] += ds * q[i];
        dvt[i] += w[k] * dz[i];
      }
    }
  }

  matmul_tn_acc(current, dq, grads.w_q);
  add_inplace(du, matmul_nt(dq, cla.w_q));
  for (std::size_t k = 0; k < n; ++k) {
    matmul_tn_acc(*states[k], dk[k], grads.w_k);
    matmul_tn_acc(*states[k], dv[k], grads.w_v);
    Tensor d_state = matmul_nt(dk[k], cla.w_k);
    add_inplace(d_state, matmul_nt(dv[k], cla.w_v));
    if (k + 1 == n) {
      add_inplace(du, d_state);
    } else {
      add_inplace(d_cache[sz(start_layer) + k], d_state);
    }
  }
}

std::string hex(const unsigned char* bytes, unsigned int len) {
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(bytes[i]);
  }
  return os.str();
}

void sha_update_tensor(EVP_MD_CTX* ctx, const std::string& name, const Tensor& t) {
  EVP_DigestUpdate(ctx, name.data(), name.size());
  for (std::size_t d : t.shape()) {
    const auto dim = static_cast<std::uint64_t>(d);
    EVP_DigestUpdate(ctx, &dim, sizeof(dim));
  }
  EVP_DigestUpdate(ctx, t.data().data(), t.size() * sizeof(double));
}

template <typename NamedList>
std::string digest_of(const NamedList& tensors) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (const auto& [name, t] : tensors) {
    sha_update_tensor(ctx, name, *t);
  }
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, out, &len);
  EVP_MD_CTX_free(ctx);
  return hex(out, len);
}

TransformerParams zero_grads_like(const TransformerParams& model) {
  TransformerParams g = model;
  for (auto& [name, t] : g.named_tensors()) {
    t->fill(0.0);
  }
  return g;
}

bool cla_finite(const ClaParams& p) {
  for (const auto& [name, t] : p.named_tensors()) {
    if (!all_finite(*t)) {
      return false;
    }
  }
  return true;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) {
    throw std::invalid_argument("train.learning_rate must be >= 0");
  }
  if (epochs < 1) {
    throw std::invalid_argument("train.epochs must be >= 1");
  }
  if (batch_size < 1) {
    throw std::invalid_argument("train.batch_size must be >= 1");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw std::invalid_argument("train.adam_beta1/adam_beta2 must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) {
    throw std::invalid_argument("train.adam_eps must be > 0");
  }
  if (grad_clip && !(*grad_clip > 0.0)) {
    throw std::invalid_argument("train.grad_clip must be > 0 when set");
  }
}

double lm_loss(const Tensor& logits, const TokenSequence& targets, const std::vector<bool>& mask) {
  if (logits.rank() != 2 || targets.size() != logits.rows() || mask.size() != logits.rows()) {
    throw std::invalid_argument("lm_loss: logits " + shape_string(logits.shape()) + " vs " +
                                std::to_string(targets.size()) + " targets and " +
                                std::to_string(mask.size()) + " mask flags");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    if (!mask[t]) {
      continue;
    }
    const auto row = logits.row(t);
    const int target = targets[t];
    if (target < 0 || sz(target) >= row.size()) {
      throw std::invalid_argument("lm_loss: target id " + std::to_string(target) +
                                  " outside vocabulary");
    }
    double mx = row[0];
    for (double v : row) {
      mx = std::max(mx, v);
    }
    double sum = 0.0;
    for (double v : row) {
      sum += std::exp(v - mx);
    }
    total += mx + std::log(sum) - row[sz(target)];
    ++count;
  }
  if (count == 0) {
    throw std::invalid_argument("lm_loss: mask selects no positions");
  }
  return total / static_cast<double>(count);
}

Tensor lm_loss_grad(const Tensor& logits, const TokenSequence& targets,
                    const std::vector<bool>& mask, double scale) {
  const auto count =
      static_cast<double>(std::count(mask.begin(), mask.end(), true));
  if (count == 0.0) {
    throw std::invalid_argument("lm_loss_grad: mask selects no positions");
  }
  Tensor grad(logits.shape());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    if (!mask[t]) {
      continue;
    }
    const auto p = softmax(logits.row(t));
    auto g = grad.row(t);
    for (std::size_t i = 0; i < p.size(); ++i) {
      g[i] = p[i] * scale / count;
    }
    g[sz(targets[t])] -= scale / count;
  }
  return grad;
}

double batch_loss(const TransformerParams& model, const ClaParams& cla, const IclaConfig& cfg,
                  const Batch& batch) {
  check_batch(batch);
  double total = 0.0;
  for (const Example& ex : batch.examples) {
    total += lm_loss(forward_with_icla(model, cla, cfg, ex.input).logits, ex.target, ex.mask);
  }
  return total / static_cast<double>(batch.examples.size());
}

double batch_loss(const TransformerParams& model, const Batch& batch) {
  check_batch(batch);
  double total = 0.0;
  for (const Example& ex : batch.examples) {
    total += lm_loss(forward_vanilla(model, ex.input).logits, ex.target, ex.mask);
  }
  return total / static_cast<double>(batch.examples.size());
}

ClaGradients backward_cla_only(const TransformerParams& model, const ClaParams& cla,
                               const IclaConfig& cfg, const Batch& batch) {
  check_batch(batch);
  const int L = model.config.num_layers;
  const int k0 = cfg.start_layer;
  const double scale = 1.0 / static_cast<double>(batch.examples.size());
  ClaGradients out{0.0, cla.zeros_like()};

  for (std::size_t e = 0; e < batch.examples.size(); ++e) {
    const Example& ex = batch.examples[e];
    IclaTape tape;
    const ForwardResult fr = forward_with_icla(model, cla, cfg, ex.input, nullptr, &tape);
    const double loss = lm_loss(fr.logits, ex.target, ex.mask);
    if (!std::isfinite(loss)) {
      throw NonFiniteLoss("non-finite loss on batch example " + std::to_string(e));
    }
    out.loss += loss * scale;
    if (!cfg.enabled) {
      continue;
    }

    const Tensor d_logits = lm_loss_grad(fr.logits, ex.target, ex.mask, scale);
    Tensor dh = matmul_nt(d_logits, model.w_out);
    const Tensor zero(dh.shape());
    std::vector<Tensor> d_cache(sz(L + 1), zero);

    for (int l = L; l >= 1; --l) {
      const bool cached = l >= k0;
      if (cached && !cfg.cache_pre_refinement) {
        add_inplace(dh, d_cache[sz(l)]);
      }
      Tensor du = dh;
      if (const auto& rec = tape.refinements[sz(l)]) {
        Tensor d_norm = dh;
        for (double& v : d_norm.data()) {
          v *= cfg.alpha;
        }
        const Tensor d_o = rms_norm_rows_backward(rec->output, cla.norm_gain, rec->inv_rms,
                                                  d_norm, &out.grads.norm_gain);
        if (rec->attended) {
          cla_backward(cla, tape, l, k0, *rec, d_o, du, d_cache, out.grads);
        } else {
          add_inplace(d_cache[sz(rec->source_layer)], d_o);
        }
      }
      if (cached && cfg.cache_pre_refinement) {
        add_inplace(du, d_cache[sz(l)]);
      }
      dh = layer_backward(model, l, tape.layers[sz(l - 1)], du);
    }
  }
  if (!std::isfinite(out.loss)) {
    throw NonFiniteLoss("non-finite batch loss");
  }
  return out;
}

ModelGradients backward_model(const TransformerParams& model, const Batch& batch) {
  check_batch(batch);
  const int L = model.config.num_layers;
  const double scale = 1.0 / static_cast<double>(batch.examples.size());
  ModelGradients out{0.0, zero_grads_like(model)};
  std::vector<LayerGrads> layer_grads;
  for (const LayerParams& lp : model.layers) {
    layer_grads.push_back(LayerGrads::zeros_like(lp));
  }

  for (const Example& ex : batch.examples) {
    std::vector<LayerActivations> acts;
    const ForwardResult fr = forward_vanilla(model, ex.input, &acts);
    const double loss = lm_loss(fr.logits, ex.target, ex.mask);
    if (!std::isfinite(loss)) {
      throw NonFiniteLoss("non-finite loss during base training");
    }
    out.loss += loss * scale;
    const Tensor d_logits = lm_loss_grad(fr.logits, ex.target, ex.mask, scale);
    matmul_tn_acc(fr.hidden.back(), d_logits, out.grads.w_out);
    Tensor dh = matmul_nt(d_logits, model.w_out);
    for (int l = L; l >= 1; --l) {
      dh = layer_backward(model, l, acts[sz(l - 1)], dh, &layer_grads[sz(l - 1)]);
    }
    for (std::size_t t = 0; t < ex.input.size(); ++t) {
      auto row = out.grads.embedding.row(sz(ex.input[t]));
      const auto g = dh.row(t);
      for (std::size_t i = 0; i < row.size(); ++i) {
        row[i] += g[i];
      }
    }
  }
  for (std::size_t l = 0; l < layer_grads.size(); ++l) {
    LayerParams& dst = out.grads.layers[l];
    LayerGrads& src = layer_grads[l];
    dst.attn_norm = std::move(src.attn_norm);
    dst.w_q = std::move(src.w_q);
    dst.w_k = std::move(src.w_k);
    dst.w_v = std::move(src.w_v);
    dst.w_o = std::move(src.w_o);
    dst.mlp_norm = std::move(src.mlp_norm);
    dst.w_up = std::move(src.w_up);
    dst.w_down = std::move(src.w_down);
  }
  return out;
}

AdamState adam_init(const std::vector<const Tensor*>& params) {
  AdamState s;
  for (const Tensor* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
               AdamState& state, const TrainConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and state counts differ");
  }
  double clip_scale = 1.0;
  if (cfg.grad_clip) {
    double sq = 0.0;
    for (const Tensor* g : grads) {
      for (double v : g->data()) {
        sq += v * v;
      }
    }
    const double norm = std::sqrt(sq);
    if (norm > *cfg.grad_clip) {
      clip_scale = *cfg.grad_clip / norm;
    }
  }
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (!p.same_shape(g) || !p.same_shape(state.m[i])) {
      throw std::invalid_argument("adam_step: shape mismatch for tensor " + std::to_string(i));
    }
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j] * clip_scale;
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      p[j] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
  }
}

namespace {

std::vector<Tensor*> tensor_ptrs(ClaParams& p) {
  std::vector<Tensor*> out;
  for (auto& [name, t] : p.named_tensors()) {
    out.push_back(t);
  }
  return out;
}

std::vector<const Tensor*> tensor_cptrs(const ClaParams& p) {
  std::vector<const Tensor*> out;
  for (const auto& [name, t] : p.named_tensors()) {
    out.push_back(t);
  }
  return out;
}

std::vector<Tensor*> tensor_ptrs(TransformerParams& p) {
  std::vector<Tensor*> out;
  for (auto& [name, t] : p.named_tensors()) {
    out.push_back(t);
  }
  return out;
}

std::vector<const Tensor*> tensor_cptrs(const TransformerParams& p) {
  std::vector<const Tensor*> out;
  for (const auto& [name, t] : p.named_tensors()) {
    out.push_back(t);
  }
  return out;
}

}  // namespace

void adam_step(ClaParams& params, const ClaParams& grads, AdamState& state,
               const TrainConfig& cfg) {
  adam_step(tensor_ptrs(params), tensor_cptrs(grads), state, cfg);
}

std::string params_digest(const TransformerParams& params) {
  return digest_of(params.named_tensors());
}

std::string params_digest(const ClaParams& params) { return digest_of(params.named_tensors()); }

std::string sha256_hex(std::string_view bytes) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  return hex(out, len);
}

std::vector<Batch> epoch_batches(const std::vector<Example>& dataset, const TrainConfig& cfg,
                                 int epoch) {
  if (dataset.empty()) {
    throw std::invalid_argument("training dataset is empty");
  }
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  SeededRng rng(derive_seed(cfg.seed, "epoch-" + std::to_string(epoch)));
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::swap(order[i], order[rng.uniform_int(i + 1)]);
  }
  std::vector<Batch> batches;
  const auto bs = sz(cfg.batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    Batch b;
    for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
      b.examples.push_back(dataset[order[i]]);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

TrainResult train_loop(const TransformerParams& model, const ClaParams& init,
                       const IclaConfig& icla_cfg, const TrainConfig& cfg,
                       const std::vector<Example>& dataset) {
  cfg.validate();
  icla_cfg.validate(model.config);
  if (dataset.empty()) {
    throw std::invalid_argument("training dataset is empty");
  }
  TrainResult result{init, {}, params_digest(model)};
  AdamState state = adam_init(tensor_cptrs(result.params));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const Batch& batch : epoch_batches(dataset, cfg, epoch)) {
      ClaGradients g;
      try {
        g = backward_cla_only(model, result.params, icla_cfg, batch);
      } catch (const NonFiniteLoss& err) {
        throw TrainingDiverged(std::string("training diverged: ") + err.what(), result.params,
                               result.loss_history);
      } catch (const std::domain_error& err) {
        throw TrainingDiverged(std::string("training diverged: ") + err.what(), result.params,
                               result.loss_history);
      }
      ClaParams candidate = result.params;
      adam_step(candidate, g.grads, state, cfg);
      result.loss_history.push_back(g.loss);
      if (!cla_finite(candidate)) {
        throw TrainingDiverged("training diverged: non-finite parameters after step " +
                                   std::to_string(result.loss_history.size()),
                               result.params, result.loss_history);
      }
      result.params = std::move(candidate);
    }
  }
  if (params_digest(model) != result.base_digest) {
    throw std::logic_error("base parameters changed during ICLA training");
  }
  return result;
}

BaseTrainResult train_base(const TransformerParams& init, const TrainConfig& cfg,
                           const std::vector<Example>& dataset) {
  cfg.validate();
  BaseTrainResult result{init, {}};
  AdamState state = adam_init(tensor_cptrs(result.params));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const Batch& batch : epoch_batches(dataset, cfg, epoch)) {
      const ModelGradients g = backward_model(result.params, batch);
      adam_step(tensor_ptrs(result.params), tensor_cptrs(g.grads), state, cfg);
      result.loss_history.push_back(g.loss);
    }
  }
  return result;
}

}  // namespace icla

#include "icla/cross_layer.hpp"

#include <cmath>
#include <stdexcept>

namespace icla {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

void require(bool ok, const std::string& message) {
  if (!ok) {
    throw std::invalid_argument(message);
  }
}

constexpr double kProjectionInitStd = 0.02;

}  // namespace

std::string to_string(IclaVariant v) {
  switch (v) {
    case IclaVariant::Full:
      return "full";
    case IclaVariant::LastOnly:
      return "last_only";
    case IclaVariant::RandomAgg:
      return "random_agg";
  }
  return "unknown";
}

IclaVariant parse_variant(const std::string& name) {
  if (name == "full") return IclaVariant::Full;
  if (name == "last_only") return IclaVariant::LastOnly;
  if (name == "random_agg") return IclaVariant::RandomAgg;
  throw std::invalid_argument("unknown ICLA variant '" + name +
                              "' (expected full, last_only or random_agg)");
}

void IclaConfig::validate(const ModelConfig& model) const {
  require(start_layer >= 0, "icla.start_layer must be >= 0");
  require(start_layer < model.num_layers, "icla.start_layer must be < model.num_layers");
  require(reduction_ratio >= 1, "icla.reduction_ratio must be >= 1");
  require(model.hidden_dim % reduction_ratio == 0,
          "icla.reduction_ratio must divide model.hidden_dim");
  require(alpha >= 0.0, "icla.alpha must be >= 0");
  require(eps > 0.0, "icla.eps must be > 0");
  require(random_agg_prob >= 0.0 && random_agg_prob <= 1.0,
          "icla.random_agg_prob must lie in [0, 1]");
}

std::size_t ClaParams::trainable_count() const {
  return w_q.size() + w_k.size() + w_v.size() + w_out.size() + norm_gain.size();
}

std::vector<std::pair<std::string, Tensor*>> ClaParams::named_tensors() {
  return {{"cla.w_q", &w_q},
          {"cla.w_k", &w_k},
          {"cla.w_v", &w_v},
          {"cla.w_out", &w_out},
          {"cla.norm_gain", &norm_gain}};
}

std::vector<std::pair<std::string, const Tensor*>> ClaParams::named_tensors() const {
  return {{"cla.w_q", &w_q},
          {"cla.w_k", &w_k},
          {"cla.w_v", &w_v},
          {"cla.w_out", &w_out},
          {"cla.norm_gain", &norm_gain}};
}

ClaParams ClaParams::zeros_like() const {
  return {Tensor(w_q.shape()), Tensor(w_k.shape()), Tensor(w_v.shape()), Tensor(w_out.shape()),
          Tensor(norm_gain.shape())};
}

ClaParams init_cla_params(const IclaConfig& cfg, int hidden_dim, SeededRng& rng) {
  if (cfg.reduction_ratio < 1 || hidden_dim % cfg.reduction_ratio != 0) {
    throw std::invalid_argument("reduction ratio " + std::to_string(cfg.reduction_ratio) +
                                " does not divide hidden dim " + std::to_string(hidden_dim));
  }
  const std::size_t d = sz(hidden_dim), dl = sz(cfg.latent_dim(hidden_dim));
  ClaParams p;
  p.w_q = rand_normal(rng, {d, dl}, kProjectionInitStd);
  p.w_k = rand_normal(rng, {d, dl}, kProjectionInitStd);
  p.w_v = rand_normal(rng, {d, dl}, kProjectionInitStd);
  p.w_out = Tensor({dl, d});
  p.norm_gain = Tensor::filled({d}, 1.0);
  return p;
}

void HiddenStateCache::append(const Tensor& state, const ClaParams& params) {
  if (!states_.empty() && !state.same_shape(states_.front())) {
    throw std::invalid_argument("hidden state cache: appended shape " +
                                shape_string(state.shape()) + " differs from cached " +
                                shape_string(states_.front().shape()));
  }
  keys_.push_back(matmul(state, params.w_k));
  values_.push_back(matmul(state, params.w_v));
  states_.push_back(state);
}

void HiddenStateCache::replace_last(const Tensor& state, const ClaParams& params) {
  if (states_.empty()) {
    throw std::logic_error("hidden state cache: replace_last on an empty cache");
  }
  if (!state.same_shape(states_.back())) {
    throw std::invalid_argument("hidden state cache: replacement shape " +
                                shape_string(state.shape()) + " differs from cached " +
                                shape_string(states_.back().shape()));
  }
  keys_.back() = matmul(state, params.w_k);
  values_.back() = matmul(state, params.w_v);
  states_.back() = state;
}

Tensor cla_attend(const HiddenStateCache& cache, const Tensor& h_l, const ClaParams& params,
                  AttentionTrace* trace, ClaActivations* acts) {
  if (cache.empty()) {
    throw std::invalid_argument("cla_attend: empty hidden state cache");
  }
  if (!(cache.state(cache.size() - 1) == h_l)) {
    throw std::invalid_argument("cla_attend: the newest cache entry must be the query state");
  }
  const std::size_t T = h_l.rows();
  const std::size_t n = cache.size();
  const std::size_t dl = params.w_q.cols();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dl));
  const int query_layer = cache.last_layer();

  Tensor query = matmul(h_l, params.w_q);
  Tensor latent({T, dl});
  std::vector<std::vector<double>> all_weights;
  if (acts != nullptr) {
    all_weights.reserve(T);
  }
  std::vector<double> scores(n);
  for (std::size_t t = 0; t < T; ++t) {
    const auto q = query.row(t);
    for (std::size_t k = 0; k < n; ++k) {
      const auto key = cache.key(k).row(t);
      double acc = 0.0;
      for (std::size_t i = 0; i < dl; ++i) {
        acc += q[i] * key[i];
      }
      scores[k] = acc * inv_sqrt;
    }
    auto weights = softmax(scores);
    auto z = latent.row(t);
    for (std::size_t k = 0; k < n; ++k) {
      const auto val = cache.value(k).row(t);
      for (std::size_t i = 0; i < dl; ++i) {
        z[i] += weights[k] * val[i];
      }
      if (trace != nullptr) {
        trace->entries.push_back({query_layer, cache.start_layer() + static_cast<int>(k),
                                  static_cast<int>(t), weights[k]});
      }
    }
    if (acts != nullptr) {
      all_weights.push_back(std::move(weights));
    }
  }
  Tensor out = matmul(latent, params.w_out);
  if (acts != nullptr) {
    acts->query = std::move(query);
    acts->weights = std::move(all_weights);
    acts->latent = std::move(latent);
  }
  return out;
}

Tensor refine(const Tensor& h_l, const Tensor& o_l, const ClaParams& params,
              const IclaConfig& cfg, std::vector<double>* inv_rms) {
  if (!h_l.same_shape(o_l)) {
    throw std::invalid_argument("refine: hidden shape " + shape_string(h_l.shape()) +
                                " vs attention output " + shape_string(o_l.shape()));
  }
  const Tensor normed = rms_norm_rows(o_l, params.norm_gain, cfg.eps, inv_rms);
  Tensor out = h_l;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = h_l[i] + cfg.alpha * normed[i];
  }
  return out;
}

std::vector<std::optional<int>> random_agg_sources(const IclaConfig& cfg, int num_layers) {
  std::vector<std::optional<int>> sources(sz(num_layers + 1));
  SeededRng rng(cfg.random_agg_seed);
  for (int l = cfg.start_layer + 1; l <= num_layers; ++l) {
    if (rng.uniform() < cfg.random_agg_prob) {
      const auto span = static_cast<std::uint64_t>(l - cfg.start_layer);
      sources[sz(l)] = cfg.start_layer + static_cast<int>(rng.uniform_int(span));
    }
  }
  return sources;
}

std::vector<bool> refined_layers(const IclaConfig& cfg, int num_layers) {
  std::vector<bool> refined(sz(num_layers + 1), false);
  if (!cfg.enabled) {
    return refined;
  }
  switch (cfg.variant) {
    case IclaVariant::Full:
      for (int l = cfg.start_layer + 1; l <= num_layers; ++l) {
        refined[sz(l)] = true;
      }
      break;
    case IclaVariant::LastOnly:
      refined[sz(num_layers)] = true;
      break;
    case IclaVariant::RandomAgg: {
      const auto sources = random_agg_sources(cfg, num_layers);
      for (int l = 0; l <= num_layers; ++l) {
        refined[sz(l)] = sources[sz(l)].has_value();
      }
      break;
    }
  }
  return refined;
}

ForwardResult forward_with_icla(const TransformerParams& model, const ClaParams& cla,
                                const IclaConfig& cfg, const TokenSequence& seq,
                                AttentionTrace* trace, IclaTape* tape) {
  const int L = model.config.num_layers;
  cfg.validate(model.config);
  const int k0 = cfg.start_layer;
  const std::vector<bool> refined = refined_layers(cfg, L);
  std::vector<std::optional<int>> sources;
  if (cfg.variant == IclaVariant::RandomAgg) {
    sources = random_agg_sources(cfg, L);
  }
  if (trace != nullptr) {
    trace->num_layers = L;
    trace->start_layer = k0;
  }
  if (tape != nullptr) {
    tape->layers.assign(sz(L), LayerActivations{});
    tape->produced.assign(sz(L + 1), Tensor{});
    tape->refinements.assign(sz(L + 1), std::nullopt);
  }

  ForwardResult out;
  out.hidden.reserve(sz(L + 1));
  out.hidden.push_back(embed(model, seq));
  if (tape != nullptr) {
    tape->produced[0] = out.hidden[0];
  }

  HiddenStateCache cache(k0);
  if (cfg.enabled && k0 == 0) {
    cache.append(out.hidden[0], cla);
  }
  for (int l = 1; l <= L; ++l) {
    Tensor produced = layer_forward(model, l, out.hidden.back(),
                                    tape != nullptr ? &tape->layers[sz(l - 1)] : nullptr);
    if (cfg.enabled && l >= k0) {
      cache.append(produced, cla);
    }
    if (!refined[sz(l)]) {
      if (tape != nullptr) {
        tape->produced[sz(l)] = produced;
      }
      out.hidden.push_back(std::move(produced));
      continue;
    }

    RefinementRecord rec;
    if (cfg.variant == IclaVariant::RandomAgg) {
      rec.source_layer = *sources[sz(l)];
      rec.output = cache.state(sz(rec.source_layer - k0));
    } else {
      rec.attended = true;
      rec.output = cla_attend(cache, produced, cla, trace, tape != nullptr ? &rec.cla : nullptr);
    }
    Tensor refined_state = refine(produced, rec.output, cla, cfg, &rec.inv_rms);
    // The state at layer L is never read back from the cache.
    if (!cfg.cache_pre_refinement && l < L) {
      cache.replace_last(refined_state, cla);
    }
    if (tape != nullptr) {
      tape->produced[sz(l)] = std::move(produced);
      tape->refinements[sz(l)] = std::move(rec);
    }
    out.hidden.push_back(std::move(refined_state));
  }
  out.logits = logits(model, out.hidden.back());
  if (tape != nullptr && cfg.enabled) {
    tape->cache = std::move(cache);
  }
  return out;
}

TokenSequence greedy_decode(const TransformerParams& model, const ClaParams& cla,
                            const IclaConfig& cfg, const TokenSequence& prompt, int max_new) {
  return greedy_decode(
      [&](const TokenSequence& s) { return forward_with_icla(model, cla, cfg, s).logits; },
      model.config.max_seq_len, prompt, max_new);
}

}  // namespace icla

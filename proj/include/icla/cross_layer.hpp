#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "icla/model.hpp"
#include "icla/numerics.hpp"

namespace icla {

enum class IclaVariant { Full, LastOnly, RandomAgg };

std::string to_string(IclaVariant v);
IclaVariant parse_variant(const std::string& name);

struct IclaConfig {
  bool enabled = true;
  int start_layer = 4;       // k0
  int reduction_ratio = 16;  // r, latent dim d' = d / r
  double alpha = 0.02;
  double eps = kDefaultRmsEps;
  IclaVariant variant = IclaVariant::Full;
  double random_agg_prob = 0.5;
  std::uint64_t random_agg_seed = 0;
  /// Cache layer states as produced by the layer instead of after refinement.
  bool cache_pre_refinement = false;

  int latent_dim(int hidden_dim) const { return hidden_dim / reduction_ratio; }
  /// Throws std::invalid_argument naming the offending field.
  void validate(const ModelConfig& model) const;

  friend bool operator==(const IclaConfig&, const IclaConfig&) = default;
};

/// Bottleneck projections shared by every refined layer.
struct ClaParams {
  Tensor w_q;        // [d x d']
  Tensor w_k;        // [d x d']
  Tensor w_v;        // [d x d']
  Tensor w_out;      // [d' x d]
  Tensor norm_gain;  // [d]

  std::size_t trainable_count() const;
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  /// Same shapes, all zeros. Used as a gradient accumulator.
  ClaParams zeros_like() const;
};

/// W_q, W_K, W_V ~ N(0, 0.02^2); W_out = 0; norm_gain = 1.
ClaParams init_cla_params(const IclaConfig& cfg, int hidden_dim, SeededRng& rng);

/// Per-sequence store of layer states k0..current with their key/value projections.
class HiddenStateCache {
 public:
  explicit HiddenStateCache(int start_layer) : start_(start_layer) {}

  void append(const Tensor& state, const ClaParams& params);
  /// Swaps in a new state for the newest entry and re-projects it.
  void replace_last(const Tensor& state, const ClaParams& params);

  int start_layer() const { return start_; }
  /// Layer index of the newest entry; start_layer() - 1 when empty.
  int last_layer() const { return start_ + static_cast<int>(states_.size()) - 1; }
  std::size_t size() const { return states_.size(); }
  bool empty() const { return states_.empty(); }

  const Tensor& state(std::size_t i) const { return states_.at(i); }
  const Tensor& key(std::size_t i) const { return keys_.at(i); }
  const Tensor& value(std::size_t i) const { return values_.at(i); }

 private:
  int start_;
  std::vector<Tensor> states_;
  std::vector<Tensor> keys_;
  std::vector<Tensor> values_;
};

struct AttentionEntry {
  int query_layer;
  int key_layer;
  int position;
  double weight;
};

struct AttentionTrace {
  int num_layers = 0;
  int start_layer = 0;
  std::vector<AttentionEntry> entries;
};

/// Intermediates of one cla_attend call, kept for the backward pass.
struct ClaActivations {
  Tensor query;                              // [T x d']
  std::vector<std::vector<double>> weights;  // [T][cache size]
  Tensor latent;                             // [T x d']
};

/// Diagonal cross-layer attention: position t of the newest cache entry attends to
/// position t of every cached layer, and only to that position.
Tensor cla_attend(const HiddenStateCache& cache, const Tensor& h_l, const ClaParams& params,
                  AttentionTrace* trace = nullptr, ClaActivations* acts = nullptr);

/// h + alpha * rms_norm(O) row-wise. Optionally returns 1/rms per row of O.
Tensor refine(const Tensor& h_l, const Tensor& o_l, const ClaParams& params,
              const IclaConfig& cfg, std::vector<double>* inv_rms = nullptr);

/// Source layer drawn for each refined layer under RandomAgg (nullopt: no refinement).
/// Indexed by layer 0..L. Deterministic in cfg.random_agg_seed.
std::vector<std::optional<int>> random_agg_sources(const IclaConfig& cfg, int num_layers);

/// Which layers get refined under cfg (indexed 0..L).
std::vector<bool> refined_layers(const IclaConfig& cfg, int num_layers);

struct RefinementRecord {
  bool attended = false;  // false: RandomAgg copy from `source_layer`
  int source_layer = -1;
  ClaActivations cla;
  Tensor output;  // O_l [T x d]
  std::vector<double> inv_rms;
};

/// Everything a backward pass through forward_with_icla needs.
struct IclaTape {
  std::vector<LayerActivations> layers;  // index l - 1
  std::vector<Tensor> produced;          // layer outputs before refinement, index l (0 = embed)
  std::vector<std::optional<RefinementRecord>> refinements;  // index l
  std::optional<HiddenStateCache> cache;                     // final cache contents
};

ForwardResult forward_with_icla(const TransformerParams& model, const ClaParams& cla,
                                const IclaConfig& cfg, const TokenSequence& seq,
                                AttentionTrace* trace = nullptr, IclaTape* tape = nullptr);

TokenSequence greedy_decode(const TransformerParams& model, const ClaParams& cla,
                            const IclaConfig& cfg, const TokenSequence& prompt, int max_new);

}  // namespace icla

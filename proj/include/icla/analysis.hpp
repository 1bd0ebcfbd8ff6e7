#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "icla/cross_layer.hpp"
#include "icla/model.hpp"

namespace icla {

/// Mean cross-layer attention weight per (query layer, key layer) cell.
struct LayerAttentionMatrix {
  int num_layers = 0;
  int start_layer = 0;
  // Indexed [query_layer][key_layer], each 0..num_layers.
  std::vector<std::vector<double>> mean_weight;
  std::vector<std::vector<std::size_t>> sample_count;

  static LayerAttentionMatrix empty(int num_layers, int start_layer);

  bool populated(int query_layer, int key_layer) const;
  std::size_t populated_count() const;
  /// Query layers with at least one populated cell, ascending.
  std::vector<int> query_layers() const;
  std::vector<int> key_layers() const;
};

/// Keeps an entry when it returns true; arguments are (trace index, position).
using PositionFilter = std::function<bool(std::size_t, int)>;

LayerAttentionMatrix aggregate_attention(const std::vector<AttentionTrace>& traces,
                                         const PositionFilter& keep = nullptr);

std::string attention_csv(const LayerAttentionMatrix& matrix);
void export_attention_csv(const LayerAttentionMatrix& matrix, const std::filesystem::path& path);
LayerAttentionMatrix parse_attention_csv(std::string_view text, int num_layers, int start_layer);

std::string heatmap_svg(const LayerAttentionMatrix& matrix);
void emit_heatmap_svg(const LayerAttentionMatrix& matrix, const std::filesystem::path& path);

/// 3*d*(d/r) + (d/r)*d, plus d for the norm gain.
std::int64_t param_count(int hidden_dim, int reduction_ratio, bool include_gain = true);

struct CostReport {
  int token_length = 0;
  std::uint64_t base_flops = 0;
  std::uint64_t icla_flops = 0;
  std::uint64_t attention_context_flops = 0;  // token-pair terms, quadratic in length
  std::uint64_t total_flops = 0;
  double overhead_percent = 0.0;
  std::int64_t params_added = 0;
};

struct FlopsOptions {
  /// Adds the quadratic score/mix terms of causal self-attention to the total.
  bool include_attention_context = false;
};

/// Counts a multiply-add as 2 FLOPs; softmax, normalization and activation cost 5 FLOPs per
/// element. ICLA FLOPs follow the operations forward_with_icla performs.
CostReport flops_report(const ModelConfig& model, const IclaConfig& icla, int token_length,
                        FlopsOptions options = {});

/// Published "params added" figures for reference backbones with r = 128.
struct ReferenceParamCount {
  std::string model;
  int hidden_dim;
  int reduction_ratio;
  std::int64_t reported;
};
const std::vector<ReferenceParamCount>& reference_param_counts();

/// Note contrasting param_count with a published figure for the same hidden size, if any.
std::optional<std::string> param_count_discrepancy(int hidden_dim, int reduction_ratio);

std::string format_cost_table(const std::vector<CostReport>& reports);
nlohmann::json cost_json(const ModelConfig& model, const IclaConfig& icla,
                         const std::vector<CostReport>& reports);

}  // namespace icla

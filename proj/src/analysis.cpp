#include "icla/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace icla {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }
std::uint64_t u64(int v) { return static_cast<std::uint64_t>(v); }

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  }
  out << content;
  if (!out) {
    throw std::runtime_error("failed writing " + path.string());
  }
}

std::string format_g9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

LayerAttentionMatrix LayerAttentionMatrix::empty(int num_layers, int start_layer) {
  LayerAttentionMatrix m;
  m.num_layers = num_layers;
  m.start_layer = start_layer;
  m.mean_weight.assign(sz(num_layers + 1), std::vector<double>(sz(num_layers + 1), 0.0));
  m.sample_count.assign(sz(num_layers + 1), std::vector<std::size_t>(sz(num_layers + 1), 0));
  return m;
}

bool LayerAttentionMatrix::populated(int query_layer, int key_layer) const {
  if (query_layer < 0 || key_layer < 0 || query_layer > num_layers || key_layer > num_layers ||
      sample_count.empty()) {
    return false;
  }
  return sample_count[sz(query_layer)][sz(key_layer)] > 0;
}

std::size_t LayerAttentionMatrix::populated_count() const {
  std::size_t n = 0;
  for (const auto& row : sample_count) {
    n += static_cast<std::size_t>(std::count_if(row.begin(), row.end(),
                                                [](std::size_t c) { return c > 0; }));
  }
  return n;
}

std::vector<int> LayerAttentionMatrix::query_layers() const {
  std::vector<int> out;
  for (int l = 0; l < static_cast<int>(sample_count.size()); ++l) {
    for (int k = 0; k < static_cast<int>(sample_count.size()); ++k) {
      if (populated(l, k)) {
        out.push_back(l);
        break;
      }
    }
  }
  return out;
}

std::vector<int> LayerAttentionMatrix::key_layers() const {
  std::vector<int> out;
  for (int k = 0; k < static_cast<int>(sample_count.size()); ++k) {
    for (int l = 0; l < static_cast<int>(sample_count.size()); ++l) {
      if (populated(l, k)) {
        out.push_back(k);
        break;
      }
    }
  }
  return out;
}

LayerAttentionMatrix aggregate_attention(const std::vector<AttentionTrace>& traces,
                                         const PositionFilter& keep) {
  if (traces.empty()) {
    return {};
  }
  const int L = traces.front().num_layers;
  const int k0 = traces.front().start_layer;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    if (traces[i].num_layers != L || traces[i].start_layer != k0) {
      throw std::invalid_argument(
          "aggregate_attention: trace " + std::to_string(i) + " has (L=" +
          std::to_string(traces[i].num_layers) + ", k0=" + std::to_string(traces[i].start_layer) +
          "), expected (L=" + std::to_string(L) + ", k0=" + std::to_string(k0) + ")");
    }
  }
  LayerAttentionMatrix m = LayerAttentionMatrix::empty(L, k0);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    for (const AttentionEntry& e : traces[i].entries) {
      if (e.key_layer < k0 || e.key_layer > e.query_layer || e.query_layer > L) {
        throw std::invalid_argument("aggregate_attention: entry (" +
                                    std::to_string(e.query_layer) + ", " +
                                    std::to_string(e.key_layer) + ") outside the cache support");
      }
      if (keep && !keep(i, e.position)) {
        continue;
      }
      m.mean_weight[sz(e.query_layer)][sz(e.key_layer)] += e.weight;
      ++m.sample_count[sz(e.query_layer)][sz(e.key_layer)];
    }
  }
  for (std::size_t l = 0; l < m.mean_weight.size(); ++l) {
    for (std::size_t k = 0; k < m.mean_weight.size(); ++k) {
      if (m.sample_count[l][k] > 0) {
        m.mean_weight[l][k] /= static_cast<double>(m.sample_count[l][k]);
      }
    }
  }
  return m;
}

std::string attention_csv(const LayerAttentionMatrix& matrix) {
  std::string out = "query_layer,key_layer,mean_weight,sample_count\n";
  for (int l = 0; l < static_cast<int>(matrix.sample_count.size()); ++l) {
    for (int k = 0; k < static_cast<int>(matrix.sample_count.size()); ++k) {
      if (!matrix.populated(l, k)) {
        continue;
      }
      out += std::to_string(l) + "," + std::to_string(k) + "," +
             format_g9(matrix.mean_weight[sz(l)][sz(k)]) + "," +
             std::to_string(matrix.sample_count[sz(l)][sz(k)]) + "\n";
    }
  }
  return out;
}

void export_attention_csv(const LayerAttentionMatrix& matrix, const std::filesystem::path& path) {
  write_file(path, attention_csv(matrix));
}

LayerAttentionMatrix parse_attention_csv(std::string_view text, int num_layers, int start_layer) {
  LayerAttentionMatrix m = LayerAttentionMatrix::empty(num_layers, start_layer);
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "query_layer,key_layer,mean_weight,sample_count") {
    throw std::invalid_argument("attention CSV: missing or wrong header");
  }
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    int l = 0, k = 0;
    double w = 0.0;
    unsigned long long c = 0;
    if (std::sscanf(line.c_str(), "%d,%d,%lf,%llu", &l, &k, &w, &c) != 4 || l < 0 || k < 0 ||
        l > num_layers || k > num_layers) {
      throw std::invalid_argument("attention CSV: malformed line " + std::to_string(line_no));
    }
    m.mean_weight[sz(l)][sz(k)] = w;
    m.sample_count[sz(l)][sz(k)] = static_cast<std::size_t>(c);
  }
  return m;
}

std::string heatmap_svg(const LayerAttentionMatrix& matrix) {
  const auto rows = matrix.query_layers();
  const auto cols = matrix.key_layers();
  if (rows.empty()) {
    throw std::invalid_argument("heatmap_svg: matrix has no populated cells");
  }
  constexpr int cell = 28;
  constexpr int margin_left = 64;
  constexpr int margin_top = 48;
  const int width = margin_left + cell * static_cast<int>(cols.size()) + 16;
  const int height = margin_top + cell * static_cast<int>(rows.size()) + 40;

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\" font-family=\"monospace\" font-size=\"11\">\n"
     << "<text x=\"" << margin_left << "\" y=\"16\">mean cross-layer attention (row: query "
     << "layer, column: key layer)</text>\n";
  for (std::size_t c = 0; c < cols.size(); ++c) {
    os << "<text x=\"" << margin_left + cell * static_cast<int>(c) + cell / 2 << "\" y=\""
       << margin_top - 6 << "\" text-anchor=\"middle\">" << cols[c] << "</text>\n";
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int y = margin_top + cell * static_cast<int>(r);
    os << "<text x=\"" << margin_left - 8 << "\" y=\"" << y + cell / 2 + 4
       << "\" text-anchor=\"end\">" << rows[r] << "</text>\n";
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (!matrix.populated(rows[r], cols[c])) {
        continue;
      }
      const double w = std::clamp(matrix.mean_weight[sz(rows[r])][sz(cols[c])], 0.0, 1.0);
      // White (0) to dark blue (1).
      const int red = static_cast<int>(std::lround(255.0 - w * (255.0 - 8.0)));
      const int green = static_cast<int>(std::lround(255.0 - w * (255.0 - 48.0)));
      const int blue = static_cast<int>(std::lround(255.0 - w * (255.0 - 107.0)));
      os << "<rect x=\"" << margin_left + cell * static_cast<int>(c) << "\" y=\"" << y
         << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(" << red << ","
         << green << "," << blue << ")\"><title>" << rows[r] << "," << cols[c] << ": "
         << format_g9(w) << "</title></rect>\n";
    }
  }
  os << "<text x=\"" << margin_left << "\" y=\"" << height - 12
     << "\">key layer (columns) / query layer (rows)</text>\n"
     << "</svg>\n";
  return os.str();
}

void emit_heatmap_svg(const LayerAttentionMatrix& matrix, const std::filesystem::path& path) {
  write_file(path, heatmap_svg(matrix));
}

std::int64_t param_count(int hidden_dim, int reduction_ratio, bool include_gain) {
  if (hidden_dim < 1 || reduction_ratio < 1 || hidden_dim % reduction_ratio != 0) {
    throw std::invalid_argument("param_count: reduction ratio " + std::to_string(reduction_ratio) +
                                " does not divide hidden dim " + std::to_string(hidden_dim));
  }
  const std::int64_t d = hidden_dim;
  const std::int64_t latent = d / reduction_ratio;
  return 3 * d * latent + latent * d + (include_gain ? d : 0);
}

CostReport flops_report(const ModelConfig& model, const IclaConfig& icla, int token_length,
                        FlopsOptions options) {
  if (token_length < 1) {
    throw std::invalid_argument("flops_report: token length must be >= 1");
  }
  model.validate();
  const std::uint64_t T = u64(token_length);
  const std::uint64_t d = u64(model.hidden_dim), m = u64(model.mlp_dim);
  const std::uint64_t V = u64(model.vocab_size), L = u64(model.num_layers);
  const std::uint64_t heads = u64(model.num_heads), hd = u64(model.head_dim());

  CostReport r;
  r.token_length = token_length;

  const std::uint64_t per_layer = 2 * 5 * T * d       // two rms_norms
                                  + 4 * 2 * T * d * d  // q, k, v, o projections
                                  + 2 * T * d          // two residual adds
                                  + 2 * 2 * T * d * m  // up and down projections
                                  + 5 * T * m;         // activation
  r.base_flops = T * d + L * per_layer + 2 * T * d * V;

  const std::uint64_t pairs = T * (T + 1) / 2;
  r.attention_context_flops = L * heads * pairs * (2 * hd + 1 + 5 + 2 * hd);

  if (icla.enabled) {
    icla.validate(model);
    const int k0 = icla.start_layer;
    const std::uint64_t dl = u64(icla.latent_dim(model.hidden_dim));
    const std::uint64_t projection = 2 * 2 * T * d * dl;  // one key and one value projection
    const auto refined = refined_layers(icla, model.num_layers);

    std::uint64_t flops = projection * u64(model.num_layers - k0 + 1);
    for (int l = k0 + 1; l <= model.num_layers; ++l) {
      if (!refined[sz(l)]) {
        continue;
      }
      if (icla.variant != IclaVariant::RandomAgg) {
        const std::uint64_t entries = u64(l - k0 + 1);
        flops += 2 * T * d * dl;                   // query projection
        flops += T * entries * (2 * dl + 1);       // scaled scores
        flops += 5 * T * entries;                  // softmax over layers
        flops += T * entries * 2 * dl;             // weighted value sum
        flops += 2 * T * dl * d;                   // output projection
      }
      flops += 5 * T * d + 2 * T * d;  // rms_norm and scaled residual add
      if (!icla.cache_pre_refinement && l < model.num_layers) {
        flops += projection;  // refined state re-projected into the cache
      }
    }
    r.icla_flops = flops;
    r.params_added = param_count(model.hidden_dim, icla.reduction_ratio, true);
  }

  r.total_flops = r.base_flops + r.icla_flops +
                  (options.include_attention_context ? r.attention_context_flops : 0);
  r.overhead_percent =
      100.0 * static_cast<double>(r.icla_flops) / static_cast<double>(r.total_flops);
  return r;
}

const std::vector<ReferenceParamCount>& reference_param_counts() {
  static const std::vector<ReferenceParamCount> refs = {
      {"LLaVA-1.5-7B", 4096, 128, 277000},
      {"Qwen2.5-VL-7B", 3584, 128, 105000},
  };
  return refs;
}

std::optional<std::string> param_count_discrepancy(int hidden_dim, int reduction_ratio) {
  for (const auto& ref : reference_param_counts()) {
    if (ref.hidden_dim != hidden_dim || ref.reduction_ratio != reduction_ratio) {
      continue;
    }
    const std::int64_t ours = param_count(hidden_dim, reduction_ratio, true);
    std::ostringstream os;
    os << "params_added=" << ours << " (3*d*d' + d'*d + d, d=" << hidden_dim
       << ", r=" << reduction_ratio << ") differs from the published " << ref.model
       << " figure of ~" << ref.reported / 1000
       << "K; no closed form over these projections reproduces both published counts";
    return os.str();
  }
  return std::nullopt;
}

std::string format_cost_table(const std::vector<CostReport>& reports) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "tokens" << std::right << std::setw(18) << "total_flops"
     << std::setw(16) << "icla_flops" << std::setw(12) << "overhead%" << std::setw(14)
     << "params_added" << '\n';
  for (const CostReport& r : reports) {
    char pct[32];
    std::snprintf(pct, sizeof(pct), "%.4f", r.overhead_percent);
    os << std::left << std::setw(8) << r.token_length << std::right << std::setw(18)
       << r.total_flops << std::setw(16) << r.icla_flops << std::setw(12) << pct
       << std::setw(14) << r.params_added << '\n';
  }
  return os.str();
}

nlohmann::json cost_json(const ModelConfig& model, const IclaConfig& icla,
                         const std::vector<CostReport>& reports) {
  nlohmann::json rows = nlohmann::json::array();
  for (const CostReport& r : reports) {
    rows.push_back({{"token_length", r.token_length},
                    {"base_flops", r.base_flops},
                    {"icla_flops", r.icla_flops},
                    {"attention_context_flops", r.attention_context_flops},
                    {"total_flops", r.total_flops},
                    {"overhead_percent", r.overhead_percent},
                    {"params_added", r.params_added}});
  }
  nlohmann::json j = {{"flops_convention",
                       "multiply-add = 2 FLOPs; softmax, normalization and activation = 5 "
                       "FLOPs per element; token-pair attention terms reported separately"},
                      {"reports", rows}};
  if (icla.enabled) {
    if (auto note = param_count_discrepancy(model.hidden_dim, icla.reduction_ratio)) {
      j["params_note"] = *note;
    }
  }
  return j;
}

}  // namespace icla

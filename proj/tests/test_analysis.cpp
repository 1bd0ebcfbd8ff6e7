#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "icla/analysis.hpp"
#include "oracle.hpp"

using namespace icla;

namespace {

std::size_t count_of(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (std::size_t p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++n;
  return n;
}

AttentionTrace trace_of(int L, int k0, std::vector<AttentionEntry> entries) {
  return AttentionTrace{L, k0, std::move(entries)};
}

}  // namespace

TEST(ParamCount, PublishedBackboneSizes) {
  EXPECT_EQ(param_count(4096, 128), 528384);
  EXPECT_EQ(param_count(3584, 128), 404992);
  EXPECT_EQ(param_count(4096, 128, false), 524288);
  EXPECT_THROW(param_count(100, 128), std::invalid_argument);
  EXPECT_THROW(param_count(64, 0), std::invalid_argument);
}

TEST(ParamCount, MatchesInitializedTensors) {
  for (int d : {8, 16, 32, 64}) {
    for (int r : {1, 2, 4, 8}) {
      IclaConfig cfg;
      cfg.reduction_ratio = r;
      SeededRng rng(1);
      const ClaParams p = init_cla_params(cfg, d, rng);
      EXPECT_EQ(static_cast<std::int64_t>(p.trainable_count()), param_count(d, r)) << d << "/" << r;
    }
  }
}

TEST(ParamCount, ShrinksWithReductionRatio) {
  std::int64_t prev = param_count(1024, 1);
  for (int r : {2, 4, 8, 16, 32, 64, 128}) {
    const std::int64_t now = param_count(1024, r);
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(Flops, MatchInstrumentedOracleExactly) {
  const ModelConfig m{4, 8, 2, 12, 11, 16};
  const TransformerParams model = testutil::random_model(m, 3, 0.3);
  SeededRng rng(4);
  for (IclaVariant v : {IclaVariant::Full, IclaVariant::LastOnly, IclaVariant::RandomAgg}) {
    for (int k0 : {0, 1, 3}) {
      for (bool pre : {false, true}) {
        for (int T : {1, 5}) {
          IclaConfig cfg;
          cfg.variant = v;
          cfg.start_layer = k0;
          cfg.reduction_ratio = 2;
          cfg.cache_pre_refinement = pre;
          cfg.random_agg_seed = 17;
          const ClaParams cla = testutil::random_cla(cfg, 8, 5, 0.3);
          oracle::OpCounter ops;
          oracle::forward(model, &cla, cfg, testutil::random_sequence(rng, 11, T), &ops);
          const CostReport r = flops_report(m, cfg, T);
          EXPECT_EQ(r.base_flops, ops.base);
          EXPECT_EQ(r.icla_flops, ops.icla) << to_string(v) << " k0=" << k0 << " pre=" << pre;
          EXPECT_EQ(r.attention_context_flops, ops.context);
          EXPECT_EQ(r.total_flops, ops.base + ops.icla);
          EXPECT_EQ(flops_report(m, cfg, T, {true}).total_flops, ops.base + ops.icla + ops.context);
        }
      }
    }
  }
}

TEST(Flops, OverheadIndependentOfLength) {
  const ModelConfig m{8, 64, 4, 256, 64, 1024};
  IclaConfig cfg;
  cfg.start_layer = 4;
  cfg.reduction_ratio = 4;
  const double ref = flops_report(m, cfg, 128).overhead_percent;
  for (int T : {256, 512, 1000}) {
    EXPECT_NEAR(flops_report(m, cfg, T).overhead_percent, ref, 1e-12);
  }
  EXPECT_GT(flops_report(m, cfg, 128, {true}).overhead_percent,
            flops_report(m, cfg, 512, {true}).overhead_percent);
}

TEST(Flops, DisabledCostsNothing) {
  const ModelConfig m{4, 16, 2, 32, 20, 64};
  IclaConfig cfg;
  cfg.enabled = false;
  const CostReport r = flops_report(m, cfg, 32);
  EXPECT_EQ(r.icla_flops, 0u);
  EXPECT_EQ(r.overhead_percent, 0.0);
  EXPECT_EQ(r.params_added, 0);
  EXPECT_THROW(flops_report(m, cfg, 0), std::invalid_argument);
}

TEST(Flops, CostJsonCarriesParamNote) {
  ModelConfig m{32, 4096, 32, 11008, 32000, 4096};
  IclaConfig cfg;
  cfg.start_layer = 16;
  cfg.reduction_ratio = 128;
  const auto j = cost_json(m, cfg, {flops_report(m, cfg, 256)});
  ASSERT_TRUE(j.contains("params_note"));
  EXPECT_NE(j["params_note"].get<std::string>().find("528384"), std::string::npos);
  EXPECT_EQ(j["reports"][0]["params_added"], 528384);
  m.hidden_dim = 512;
  m.num_heads = 8;
  EXPECT_FALSE(cost_json(m, cfg, {flops_report(m, cfg, 256)}).contains("params_note"));
  const std::string table = format_cost_table({flops_report(m, cfg, 128), flops_report(m, cfg, 256)});
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
}

TEST(Aggregate, SingleTraceIsIdentity) {
  const auto m = aggregate_attention({trace_of(3, 1, {{2, 1, 0, 0.3}, {2, 2, 0, 0.7}})});
  EXPECT_DOUBLE_EQ(m.mean_weight[2][1], 0.3);
  EXPECT_DOUBLE_EQ(m.mean_weight[2][2], 0.7);
  EXPECT_EQ(m.populated_count(), 2u);
}

TEST(Aggregate, MeansAcrossTracesAndFilters) {
  const std::vector<AttentionTrace> traces = {
      trace_of(3, 1, {{2, 1, 0, 0.2}, {2, 2, 0, 0.8}, {2, 1, 1, 0.6}, {2, 2, 1, 0.4}}),
      trace_of(3, 1, {{2, 1, 0, 0.4}, {2, 2, 0, 0.6}})};
  const auto all = aggregate_attention(traces);
  EXPECT_NEAR(all.mean_weight[2][1], (0.2 + 0.6 + 0.4) / 3, 1e-15);
  EXPECT_EQ(all.sample_count[2][1], 3u);
  const auto first = aggregate_attention(traces, [](std::size_t, int pos) { return pos == 0; });
  EXPECT_NEAR(first.mean_weight[2][1], 0.3, 1e-15);
  EXPECT_NEAR(first.mean_weight[2][1] + first.mean_weight[2][2], 1.0, 1e-15);
  EXPECT_THROW(aggregate_attention({traces[0], trace_of(4, 1, {})}), std::invalid_argument);
  EXPECT_THROW(aggregate_attention({trace_of(3, 1, {{2, 0, 0, 1.0}})}), std::invalid_argument);
  EXPECT_EQ(aggregate_attention({}).populated_count(), 0u);
}

TEST(Aggregate, RealTracesHaveNormalizedRows) {
  const ModelConfig m{5, 8, 2, 12, 11, 16};
  const TransformerParams model = testutil::random_model(m, 8, 0.3);
  for (IclaVariant v : {IclaVariant::Full, IclaVariant::LastOnly}) {
    IclaConfig cfg;
    cfg.variant = v;
    cfg.start_layer = 1;
    cfg.reduction_ratio = 2;
    const ClaParams cla = testutil::random_cla(cfg, 8, 9, 0.5);
    SeededRng rng(10);
    std::vector<AttentionTrace> traces(4);
    for (auto& t : traces) forward_with_icla(model, cla, cfg, testutil::random_sequence(rng, 11, 6), &t);
    const auto mat = aggregate_attention(traces);
    const std::vector<int> rows = mat.query_layers();
    if (v == IclaVariant::LastOnly) {
      EXPECT_EQ(rows, std::vector<int>{5});
    } else {
      EXPECT_EQ(rows, (std::vector<int>{2, 3, 4, 5}));
    }
    for (int l : rows) {
      double sum = 0.0;
      for (int k = 0; k <= 5; ++k) {
        EXPECT_EQ(mat.populated(l, k), k >= 1 && k <= l);
        sum += mat.mean_weight[l][k];
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(AttentionCsv, HeaderOnlyWhenEmptyAndRowsOtherwise) {
  EXPECT_EQ(attention_csv(LayerAttentionMatrix::empty(4, 1)),
            "query_layer,key_layer,mean_weight,sample_count\n");
  std::vector<AttentionEntry> entries;
  const int L = 6, k0 = 2;
  for (int l = k0 + 1; l <= L; ++l)
    for (int k = k0; k <= l; ++k) entries.push_back({l, k, 0, 1.0 / (l - k0 + 1)});
  const auto m = aggregate_attention({trace_of(L, k0, entries)});
  const std::string csv = attention_csv(m);
  std::size_t expected_rows = 0;
  for (int l = k0 + 1; l <= L; ++l) expected_rows += static_cast<std::size_t>(l - k0 + 1);
  EXPECT_EQ(count_of(csv, "\n"), expected_rows + 1);
  const auto back = parse_attention_csv(csv, L, k0);
  for (int l = 0; l <= L; ++l) {
    for (int k = 0; k <= L; ++k) {
      EXPECT_EQ(back.sample_count[l][k], m.sample_count[l][k]);
      EXPECT_NEAR(back.mean_weight[l][k], m.mean_weight[l][k], 1e-8);
    }
  }
  EXPECT_THROW(parse_attention_csv("a,b\n", L, k0), std::invalid_argument);
  EXPECT_THROW(parse_attention_csv("query_layer,key_layer,mean_weight,sample_count\n9,1,0.5,1\n", L,
                                   k0),
               std::invalid_argument);
}

TEST(Heatmap, OneRectPerCellAndDeterministic) {
  const auto m = aggregate_attention(
      {trace_of(3, 1, {{2, 1, 0, 0.25}, {2, 2, 0, 0.75}, {3, 1, 0, 0.2}, {3, 2, 0, 0.3}, {3, 3, 0, 0.5}})});
  const std::string svg = heatmap_svg(m);
  EXPECT_EQ(count_of(svg, "<rect"), 5u);
  EXPECT_EQ(svg, heatmap_svg(m));
  EXPECT_EQ(svg.rfind("</svg>\n"), svg.size() - 7);
  EXPECT_THROW(heatmap_svg(LayerAttentionMatrix::empty(3, 1)), std::invalid_argument);
}

TEST(Heatmap, UniformWeightsGiveOneColor) {
  const auto m = aggregate_attention(
      {trace_of(2, 0, {{1, 0, 0, 0.5}, {1, 1, 0, 0.5}, {2, 0, 0, 0.5}, {2, 2, 0, 0.5}})});
  const std::string svg = heatmap_svg(m);
  EXPECT_EQ(count_of(svg, "<rect"), 4u);
  EXPECT_EQ(count_of(svg, "fill=\"rgb(132,152,181)\""), 4u);
}

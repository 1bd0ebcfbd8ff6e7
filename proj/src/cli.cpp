#include "icla/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "icla/analysis.hpp"
#include "icla/checkpoint.hpp"
#include "icla/run_config.hpp"
#include "icla/serialization.hpp"
#include "icla/training.hpp"

namespace icla {

using nlohmann::json;
namespace fs = std::filesystem;

EvalMetrics evaluate(const LogitsFn& logits_fn, const std::vector<Example>& data) {
  if (data.empty()) {
    throw std::invalid_argument("evaluate: empty dataset");
  }
  EvalMetrics m;
  std::size_t hits = 0, conflict_hits = 0;
  double loss_sum = 0.0;
  for (const Example& ex : data) {
    const Tensor lg = logits_fn(ex.input);
    loss_sum += lm_loss(lg, ex.target, ex.mask);
    for (std::size_t t = 0; t < ex.mask.size(); ++t) {
      if (!ex.mask[t]) {
        continue;
      }
      const bool hit = argmax(lg.row(t)) == ex.target[t];
      ++m.positions;
      hits += hit ? 1 : 0;
      if (t < ex.conflict.size() && ex.conflict[t]) {
        ++m.conflict_positions;
        conflict_hits += hit ? 1 : 0;
      }
    }
  }
  m.loss = loss_sum / static_cast<double>(data.size());
  m.accuracy = static_cast<double>(hits) / static_cast<double>(m.positions);
  if (m.conflict_positions > 0) {
    m.conflict_accuracy =
        static_cast<double>(conflict_hits) / static_cast<double>(m.conflict_positions);
  }
  return m;
}

EvalMetrics evaluate(const TransformerParams& model, const ClaParams* cla, const IclaConfig& cfg,
                     const std::vector<Example>& data) {
  if (cla == nullptr) {
    return evaluate([&](const TokenSequence& s) { return forward_vanilla(model, s).logits; },
                    data);
  }
  return evaluate(
      [&](const TokenSequence& s) { return forward_with_icla(model, *cla, cfg, s).logits; }, data);
}

json metrics_json(const EvalMetrics& m, std::uint64_t seed, const std::string& config_digest) {
  json j = {{"loss", m.loss}, {"accuracy", m.accuracy}};
  if (m.conflict_accuracy) {
    j["conflict_accuracy"] = *m.conflict_accuracy;
  }
  j["seed"] = seed;
  j["config_digest"] = config_digest;
  return j;
}

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
  std::vector<std::string> overrides;
};

// Sets a dotted path such as "icla.alpha" in the raw config document.
void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set", "expected key.path=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) {
      throw ConfigError("--set", "empty segment in '" + path + "'");
    }
    if (!node->is_object()) {
      throw ConfigError(path.substr(0, start == 0 ? 0 : start - 1), "not an object");
    }
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) {
      *node = json::object();
    }
    start = dot + 1;
  }
}

RunConfig resolve_config(const GlobalOptions& g) {
  json doc = json::object();
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) {
      throw ConfigError("--config", "cannot open " + g.config_path);
    }
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("--config", g.config_path + " is not valid JSON: " + e.what());
    }
  }
  for (const std::string& o : g.overrides) {
    apply_override(doc, o);
  }
  RunConfig cfg = run_config_from_json(doc);
  if (g.seed) {
    cfg.seed = *g.seed;
    cfg.derive_seeds();
  }
  cfg.validate();
  return cfg;
}

void check_model_matches(const ModelConfig& ckpt, const ModelConfig& cfg) {
  const auto check = [](const char* field, int have, int want) {
    if (have != want) {
      throw ConfigError(std::string("model.") + field, "checkpoint has " + std::to_string(have) +
                                                           ", config has " + std::to_string(want));
    }
  };
  check("num_layers", ckpt.num_layers, cfg.num_layers);
  check("hidden_dim", ckpt.hidden_dim, cfg.hidden_dim);
  check("vocab_size", ckpt.vocab_size, cfg.vocab_size);
  check("num_heads", ckpt.num_heads, cfg.num_heads);
  check("mlp_dim", ckpt.mlp_dim, cfg.mlp_dim);
  check("max_seq_len", ckpt.max_seq_len, cfg.max_seq_len);
}

bool has_cla_tensors(const Checkpoint& ckpt) {
  for (const NamedTensor& nt : ckpt.tensors) {
    if (nt.name.rfind("cla.", 0) == 0) {
      return true;
    }
  }
  return false;
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  }
  os << text;
  if (!os) {
    throw std::runtime_error("failed writing " + path.string());
  }
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

std::string opt_fmt(const std::optional<double>& v) { return v ? fmt("%.4f", *v) : "-"; }

double dataset_loss(const TransformerParams& model, const ClaParams& cla, const IclaConfig& cfg,
                    const std::vector<Example>& data) {
  return batch_loss(model, cla, cfg, Batch{data});
}

struct Context {
  GlobalOptions global;
  RunConfig cfg;
  std::string digest;
  std::ostream& out;
  std::ostream& err;

  std::ostream& log() {
    static std::ostringstream sink;
    sink.str("");
    return global.quiet ? sink : out;
  }
  fs::path out_or(const fs::path& fallback) const {
    return global.out.empty() ? fallback : fs::path(global.out);
  }
  fs::path checkpoints() const { return cfg.checkpoints_dir; }
  fs::path reports() const { return cfg.reports_dir; }
};

Checkpoint load_matching(Context& ctx, const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  check_model_matches(ckpt.model_config, ctx.cfg.model);
  return ckpt;
}

int cmd_train_base(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  SeededRng init_rng(derive_seed(cfg.seed, seed_labels::kModelInit));
  const TransformerParams init = TransformerParams::init(cfg.model, init_rng);
  const std::vector<Example> data = make_dataset(cfg.base_task, cfg.base_train_examples);
  const BaseTrainResult result = train_base(init, cfg.base_train, data);

  Checkpoint ckpt{cfg.model, cfg.icla, cfg.base_train, {}};
  for (const auto& [name, t] : result.params.named_tensors()) {
    ckpt.tensors.push_back({name, *t});
  }
  const fs::path path = ctx.out_or(ctx.checkpoints() / "base.ckpt");
  ensure_parent(path);
  save_checkpoint(path, ckpt);

  const TransformerParams saved = model_from_checkpoint(ckpt);
  const double final_loss = batch_loss(saved, Batch{data});
  write_json(ctx.reports() / "train_base.json",
             {{"loss_history", result.loss_history},
              {"final_dataset_loss", final_loss},
              {"params_digest", params_digest(saved)},
              {"seed", cfg.seed},
              {"config_digest", ctx.digest}});
  ctx.log() << "train-base: " << data.size() << " examples, " << result.loss_history.size()
            << " steps, final dataset loss " << fmt("%.4f", final_loss) << "\n"
            << "checkpoint: " << path.string() << "\n";
  return kExitOk;
}

struct IclaRun {
  TrainResult result;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

IclaRun run_icla_training(const TransformerParams& base, const IclaConfig& icla,
                          const RunConfig& cfg, const std::vector<Example>& data) {
  SeededRng cla_rng(derive_seed(cfg.seed, seed_labels::kClaInit));
  const ClaParams init = init_cla_params(icla, cfg.model.hidden_dim, cla_rng);
  IclaRun run;
  run.initial_loss = dataset_loss(base, init, icla, data);
  run.result = train_loop(base, init, icla, cfg.train, data);
  run.final_loss = dataset_loss(base, run.result.params, icla, data);
  return run;
}

std::string default_base(const Context& ctx) { return (ctx.checkpoints() / "base.ckpt").string(); }

int cmd_train_icla(Context& ctx, const std::string& base_path) {
  const RunConfig& cfg = ctx.cfg;
  const Checkpoint base_ckpt = load_matching(ctx, base_path.empty() ? default_base(ctx) : base_path);
  const TransformerParams base = model_from_checkpoint(base_ckpt);
  const std::vector<Example> data = make_dataset(cfg.task, cfg.train_examples);
  const IclaRun run = run_icla_training(base, cfg.icla, cfg, data);

  // Round the CLA weights through the checkpoint format so the report describes the saved file.
  const Checkpoint ckpt = parse_checkpoint(
      serialize_checkpoint(make_checkpoint(base, run.result.params, cfg.icla, cfg.train)));
  const fs::path path = ctx.out_or(ctx.checkpoints() / "icla.ckpt");
  ensure_parent(path);
  save_checkpoint(path, ckpt);

  const ClaParams saved = cla_from_checkpoint(ckpt);
  write_json(ctx.reports() / "train_icla.json",
             {{"variant", to_string(cfg.icla.variant)},
              {"loss_history", run.result.loss_history},
              {"initial_dataset_loss", run.initial_loss},
              {"final_dataset_loss", run.final_loss},
              {"base_digest", run.result.base_digest},
              {"cla_digest", params_digest(saved)},
              {"trainable_params", saved.trainable_count()},
              {"seed", cfg.seed},
              {"config_digest", ctx.digest}});
  ctx.log() << "train-icla (" << to_string(cfg.icla.variant) << "): " << data.size()
            << " examples, " << run.result.loss_history.size() << " steps, dataset loss "
            << fmt("%.4f", run.initial_loss) << " -> " << fmt("%.4f", run.final_loss) << "\n"
            << "base digest unchanged: " << run.result.base_digest << "\n"
            << "checkpoint: " << path.string() << "\n";
  return kExitOk;
}

int cmd_eval(Context& ctx, const std::string& ckpt_path, bool vanilla, const CliHooks& hooks) {
  const RunConfig& cfg = ctx.cfg;
  const std::vector<Example> data = make_dataset(eval_task(cfg), cfg.eval_examples);
  EvalMetrics m;
  std::string mode;
  if (hooks.logits_override) {
    m = evaluate(hooks.logits_override, data);
    mode = "override";
  } else {
    const std::string path =
        ckpt_path.empty() ? (ctx.checkpoints() / "icla.ckpt").string() : ckpt_path;
    const Checkpoint ckpt = load_matching(ctx, path);
    const TransformerParams model = model_from_checkpoint(ckpt);
    if (vanilla || !has_cla_tensors(ckpt) || !ckpt.icla_config.enabled) {
      m = evaluate(model, nullptr, ckpt.icla_config, data);
      mode = "vanilla";
    } else {
      const ClaParams cla = cla_from_checkpoint(ckpt);
      m = evaluate(model, &cla, ckpt.icla_config, data);
      mode = "icla/" + to_string(ckpt.icla_config.variant);
    }
  }
  const json j = metrics_json(m, cfg.seed, ctx.digest);
  write_json(ctx.out_or(ctx.reports() / "eval.json"), j);
  ctx.log() << "eval (" << mode << ", " << data.size() << " examples)\n"
            << "  loss               " << fmt("%.6f", m.loss) << "\n"
            << "  accuracy           " << fmt("%.4f", m.accuracy) << "\n"
            << "  conflict_accuracy  " << opt_fmt(m.conflict_accuracy) << "\n";
  return kExitOk;
}

int cmd_ablate(Context& ctx, const std::string& base_path) {
  const RunConfig& cfg = ctx.cfg;
  const Checkpoint base_ckpt = load_matching(ctx, base_path.empty() ? default_base(ctx) : base_path);
  const TransformerParams base = model_from_checkpoint(base_ckpt);
  const std::vector<Example> train_data = make_dataset(cfg.task, cfg.train_examples);
  const std::vector<Example> eval_data = make_dataset(eval_task(cfg), cfg.eval_examples);

  struct Row {
    std::string name;
    EvalMetrics metrics;
    std::optional<double> initial_loss, final_loss;
    std::string cla_digest;
  };
  std::vector<Row> rows;
  rows.push_back({"vanilla", evaluate(base, nullptr, cfg.icla, eval_data), {}, {}, ""});
  for (IclaVariant v : {IclaVariant::Full, IclaVariant::LastOnly, IclaVariant::RandomAgg}) {
    IclaConfig icla = cfg.icla;
    icla.enabled = true;
    icla.variant = v;
    const IclaRun run = run_icla_training(base, icla, cfg, train_data);
    rows.push_back({to_string(v), evaluate(base, &run.result.params, icla, eval_data),
                    run.initial_loss, run.final_loss, params_digest(run.result.params)});
  }

  json variants = json::array();
  std::string csv = "variant,loss,accuracy,conflict_accuracy,initial_train_loss,final_train_loss\n";
  const auto csv_num = [](const std::optional<double>& v) {
    return v ? fmt("%.9g", *v) : std::string();
  };
  std::ostringstream table;
  table << "variant      eval_loss  accuracy  conflict_acc  train_loss\n";
  for (const Row& r : rows) {
    json entry = metrics_json(r.metrics, cfg.seed, ctx.digest);
    entry.erase("seed");
    entry.erase("config_digest");
    entry["variant"] = r.name;
    if (r.initial_loss) {
      entry["initial_train_loss"] = *r.initial_loss;
      entry["final_train_loss"] = *r.final_loss;
      entry["cla_digest"] = r.cla_digest;
    }
    variants.push_back(entry);
    csv += r.name + "," + csv_num(r.metrics.loss) + "," + csv_num(r.metrics.accuracy) + "," +
           csv_num(r.metrics.conflict_accuracy) + "," + csv_num(r.initial_loss) + "," +
           csv_num(r.final_loss) + "\n";
    char line[160];
    std::snprintf(line, sizeof(line), "%-11s  %9.4f  %8.4f  %12s  %s\n", r.name.c_str(),
                  r.metrics.loss, r.metrics.accuracy, opt_fmt(r.metrics.conflict_accuracy).c_str(),
                  r.initial_loss
                      ? (fmt("%.4f", *r.initial_loss) + " -> " + fmt("%.4f", *r.final_loss)).c_str()
                      : "-");
    table << line;
  }
  const fs::path dir = ctx.out_or(ctx.reports());
  write_json(dir / "ablation.json",
             {{"variants", variants}, {"seed", cfg.seed}, {"config_digest", ctx.digest}});
  write_text(dir / "ablation.csv", csv);
  ctx.log() << table.str() << "reports: " << (dir / "ablation.csv").string() << "\n";
  return kExitOk;
}

int cmd_attn(Context& ctx, const std::string& ckpt_path, bool answer_only) {
  const RunConfig& cfg = ctx.cfg;
  const std::string path =
      ckpt_path.empty() ? (ctx.checkpoints() / "icla.ckpt").string() : ckpt_path;
  const Checkpoint ckpt = load_matching(ctx, path);
  if (!has_cla_tensors(ckpt) || !ckpt.icla_config.enabled) {
    throw ConfigError("--checkpoint", "checkpoint carries no ICLA parameters");
  }
  if (ckpt.icla_config.variant == IclaVariant::RandomAgg) {
    throw ConfigError("icla.variant", "random_agg records no attention weights");
  }
  const TransformerParams model = model_from_checkpoint(ckpt);
  const ClaParams cla = cla_from_checkpoint(ckpt);
  const std::vector<Example> data = make_dataset(eval_task(cfg), cfg.eval_examples);
  std::vector<AttentionTrace> traces(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    forward_with_icla(model, cla, ckpt.icla_config, data[i].input, &traces[i]);
  }
  PositionFilter keep;
  if (answer_only) {
    keep = [&](std::size_t trace, int pos) { return data[trace].mask[static_cast<std::size_t>(pos)]; };
  }
  const LayerAttentionMatrix matrix = aggregate_attention(traces, keep);
  const fs::path dir = ctx.out_or(ctx.reports());
  fs::create_directories(dir);
  export_attention_csv(matrix, dir / "attention.csv");
  emit_heatmap_svg(matrix, dir / "attention.svg");
  ctx.log() << "attn: " << traces.size() << " traces, " << matrix.populated_count()
            << " populated cells" << (answer_only ? " (answer positions only)" : "") << "\n"
            << "wrote " << (dir / "attention.csv").string() << " and "
            << (dir / "attention.svg").string() << "\n";
  return kExitOk;
}

int cmd_cost(Context& ctx, const std::vector<int>& tokens, bool include_context) {
  const RunConfig& cfg = ctx.cfg;
  std::vector<CostReport> reports;
  for (int t : tokens) {
    if (t < 1) {
      throw ConfigError("--tokens", "token lengths must be >= 1");
    }
    reports.push_back(flops_report(cfg.model, cfg.icla, t, FlopsOptions{include_context}));
  }
  const json j = cost_json(cfg.model, cfg.icla, reports);
  write_json(ctx.out_or(ctx.reports() / "cost.json"), j);
  ctx.log() << format_cost_table(reports);
  if (j.contains("params_note")) {
    ctx.log() << "note: " << j["params_note"].get<std::string>() << "\n";
  }
  return kExitOk;
}

int cmd_gen_data(Context& ctx, const std::string& split, std::optional<int> count) {
  const RunConfig& cfg = ctx.cfg;
  TaskSpec spec;
  int n = 0;
  if (split == "train") {
    spec = cfg.task;
    n = cfg.train_examples;
  } else if (split == "base") {
    spec = cfg.base_task;
    n = cfg.base_train_examples;
  } else {
    spec = eval_task(cfg);
    n = cfg.eval_examples;
  }
  if (count) {
    if (*count < 1) {
      throw ConfigError("--count", "must be >= 1");
    }
    n = *count;
  }
  const std::vector<Example> data = make_dataset(spec, n);
  if (ctx.global.out.empty()) {
    write_jsonl(ctx.out, data);
  } else {
    std::ostringstream os;
    write_jsonl(os, data);
    write_text(ctx.global.out, os.str());
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
            const CliHooks& hooks) {
  CLI::App app{"Inner cross-layer attention: training, evaluation and analysis", "icla"};
  app.fallthrough();
  app.require_subcommand(1);

  GlobalOptions g;
  app.add_option("--config", g.config_path, "JSON run configuration");
  app.add_option("--seed", g.seed, "Root seed; overrides the config");
  app.add_option("--out", g.out, "Primary output path (file or directory per command)");
  app.add_flag("--quiet", g.quiet, "Suppress human-readable output");
  app.add_option("--set", g.overrides, "Override a config field, e.g. --set icla.alpha=0.1");

  std::string base_path, ckpt_path, split = "eval";
  bool vanilla = false, answer_only = false, include_context = false;
  std::optional<int> count;
  std::vector<int> tokens{128, 256, 512};

  CLI::App* train_base = app.add_subcommand("train-base", "Train the base model (no ICLA)");
  CLI::App* train_icla =
      app.add_subcommand("train-icla", "Fine-tune ICLA parameters on a frozen base");
  train_icla->add_option("--base", base_path, "Base checkpoint (default <checkpoints>/base.ckpt)");
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on held-out data");
  eval->add_option("--checkpoint", ckpt_path, "Checkpoint (default <checkpoints>/icla.ckpt)");
  eval->add_flag("--vanilla", vanilla, "Ignore ICLA parameters");
  CLI::App* ablate =
      app.add_subcommand("ablate", "Train and compare full, last_only and random_agg");
  ablate->add_option("--base", base_path, "Base checkpoint (default <checkpoints>/base.ckpt)");
  CLI::App* attn = app.add_subcommand("attn", "Export aggregated cross-layer attention");
  attn->add_option("--checkpoint", ckpt_path, "Checkpoint (default <checkpoints>/icla.ckpt)");
  attn->add_flag("--answer-only", answer_only, "Aggregate over loss positions only");
  CLI::App* cost = app.add_subcommand("cost", "FLOPs and parameter overhead report");
  cost->add_option("--tokens", tokens, "Token lengths")->delimiter(',');
  cost->add_flag("--include-context", include_context,
                 "Include quadratic attention-context FLOPs in the base count");
  CLI::App* gen_data = app.add_subcommand("gen-data", "Write task examples as JSONL");
  gen_data->add_option("--split", split, "train, base or eval")
      ->check(CLI::IsMember({"train", "base", "eval"}));
  gen_data->add_option("--count", count, "Number of examples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    Context ctx{g, resolve_config(g), "", out, err};
    ctx.digest = config_digest(ctx.cfg);
    fs::create_directories(ctx.reports());
    if (app.got_subcommand(train_base)) return cmd_train_base(ctx);
    if (app.got_subcommand(train_icla)) return cmd_train_icla(ctx, base_path);
    if (app.got_subcommand(eval)) return cmd_eval(ctx, ckpt_path, vanilla, hooks);
    if (app.got_subcommand(ablate)) return cmd_ablate(ctx, base_path);
    if (app.got_subcommand(attn)) return cmd_attn(ctx, ckpt_path, answer_only);
    if (app.got_subcommand(cost)) return cmd_cost(ctx, tokens, include_context);
    if (app.got_subcommand(gen_data)) return cmd_gen_data(ctx, split, count);
    err << app.help();
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace icla

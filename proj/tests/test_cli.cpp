#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "helpers.hpp"
#include "icla/checkpoint.hpp"
#include "icla/cli.hpp"
#include "icla/run_config.hpp"
#include "icla/serialization.hpp"

using namespace icla;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run(std::vector<std::string> args, const CliHooks& hooks = {}) {
  args.insert(args.begin(), "icla");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err, hooks);
  return {code, out.str(), err.str()};
}

json small_config(const fs::path& dir) {
  return {{"model",
           {{"num_layers", 3}, {"hidden_dim", 16}, {"num_heads", 2}, {"mlp_dim", 32},
            {"vocab_size", 24}, {"max_seq_len", 16}}},
          {"icla", {{"start_layer", 1}, {"reduction_ratio", 4}, {"alpha", 0.2}}},
          {"train", {{"learning_rate", 0.01}, {"epochs", 1}, {"batch_size", 8}}},
          {"task", {{"kind", "kv_recall"}, {"seq_len", 7}, {"num_pairs", 2}}},
          {"train_examples", 24},
          {"base_train_examples", 24},
          {"eval_examples", 12},
          {"paths", {{"checkpoints", (dir / "ck").string()}, {"reports", (dir / "rep").string()}}},
          {"seed", 11}};
}

fs::path write_config(const fs::path& dir, const json& j) {
  const fs::path p = dir / "cfg.json";
  std::ofstream(p) << j.dump();
  return p;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"cost", "--bogus"}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  const CliRun help = run({"--help"});
  EXPECT_EQ(help.code, kExitOk);
  EXPECT_NE(help.out.find("train-icla"), std::string::npos);
}

TEST(Cli, ValidationErrorsExitTwoBeforeWork) {
  const fs::path dir = testutil::scratch_dir("cli_validation");
  const fs::path cfg = write_config(dir, small_config(dir));
  CliRun r = run({"--config", cfg.string(), "--set", "icla.start_layer=3", "train-base"});
  EXPECT_EQ(r.code, kExitValidation);
  EXPECT_NE(r.err.find("icla.start_layer"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "ck"));

  r = run({"--config", cfg.string(), "--set", "model.hidden_dim=15", "cost"});
  EXPECT_EQ(r.code, kExitValidation);
  EXPECT_NE(r.err.find("model."), std::string::npos);

  r = run({"--config", cfg.string(), "--set", "icla.alhpa=0.1", "cost"});
  EXPECT_EQ(r.code, kExitValidation);
  EXPECT_NE(r.err.find("icla.alhpa"), std::string::npos);

  r = run({"--config", (dir / "missing.json").string(), "cost"});
  EXPECT_EQ(r.code, kExitValidation);
}

TEST(Cli, CostWithIclaDisabledReportsZero) {
  const fs::path dir = testutil::scratch_dir("cli_cost");
  const fs::path cfg = write_config(dir, small_config(dir));
  const CliRun r = run({"--config", cfg.string(), "--set", "icla.enabled=false", "cost", "--tokens",
                     "8,16"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const json j = read_json(dir / "rep" / "cost.json");
  ASSERT_EQ(j["reports"].size(), 2u);
  for (const auto& row : j["reports"]) {
    EXPECT_EQ(row["icla_flops"], 0);
    EXPECT_EQ(row["overhead_percent"], 0.0);
  }
}

TEST(Cli, OracleLogitsScorePerfectly) {
  const fs::path dir = testutil::scratch_dir("cli_oracle");
  const fs::path cfg = write_config(dir, small_config(dir));
  CliHooks hooks;
  hooks.logits_override = [](const TokenSequence& seq) {
    Tensor lg({seq.size(), 24});
    const std::size_t q = seq.size() - 1;
    for (std::size_t i = 1; i + 1 < q; i += 2) {
      if (seq[i] == seq[q]) lg(q, static_cast<std::size_t>(seq[i + 1])) = 1000.0;
    }
    return lg;
  };
  const CliRun r = run({"--config", cfg.string(), "eval"}, hooks);
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const json j = read_json(dir / "rep" / "eval.json");
  EXPECT_LT(j["loss"].get<double>(), 1e-300);
  EXPECT_EQ(j["accuracy"].get<double>(), 1.0);
  EXPECT_EQ(j["seed"], 11);
  EXPECT_EQ(j["config_digest"].get<std::string>().size(), 64u);
}

TEST(Cli, ZeroOutputProjectionMatchesVanilla) {
  const fs::path dir = testutil::scratch_dir("cli_zero");
  const json doc = small_config(dir);
  const fs::path cfg = write_config(dir, doc);
  const RunConfig rc = run_config_from_json(doc);
  const TransformerParams model = testutil::random_model(rc.model, 2, 0.3);
  ClaParams cla = testutil::random_cla(rc.icla, rc.model.hidden_dim, 3, 0.3);
  cla.w_out.fill(0.0);
  save_checkpoint(dir / "z.ckpt", make_checkpoint(model, cla, rc.icla, rc.train));

  ASSERT_EQ(run({"--config", cfg.string(), "--out", (dir / "a.json").string(), "eval",
                 "--checkpoint", (dir / "z.ckpt").string()})
                .code,
            kExitOk);
  ASSERT_EQ(run({"--config", cfg.string(), "--out", (dir / "b.json").string(), "eval",
                 "--checkpoint", (dir / "z.ckpt").string(), "--vanilla"})
                .code,
            kExitOk);
  EXPECT_EQ(read_bytes(dir / "a.json"), read_bytes(dir / "b.json"));
}

TEST(Cli, CheckpointMismatchExitsTwo) {
  const fs::path dir = testutil::scratch_dir("cli_mismatch");
  const json doc = small_config(dir);
  const fs::path cfg = write_config(dir, doc);
  const RunConfig rc = run_config_from_json(doc);
  ModelConfig other = rc.model;
  other.num_layers = 4;
  save_checkpoint(dir / "o.ckpt",
                  make_checkpoint(testutil::random_model(other, 1, 0.1),
                                  testutil::random_cla(rc.icla, rc.model.hidden_dim, 1, 0.1),
                                  rc.icla, rc.train));
  const CliRun r = run({"--config", cfg.string(), "eval", "--checkpoint", (dir / "o.ckpt").string()});
  EXPECT_EQ(r.code, kExitValidation);
  EXPECT_NE(r.err.find("model.num_layers"), std::string::npos);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  EXPECT_EQ(run({"--config", cfg.string(), "eval", "--checkpoint", (dir / "junk.ckpt").string()})
                .code,
            kExitRuntime);
}

TEST(Cli, EndToEndPipeline) {
  const fs::path dir = testutil::scratch_dir("cli_pipeline");
  const fs::path cfg = write_config(dir, small_config(dir));
  const std::string c = cfg.string();
  ASSERT_EQ(run({"--config", c, "--quiet", "train-base"}).code, kExitOk);
  ASSERT_TRUE(fs::exists(dir / "ck" / "base.ckpt"));
  const CliRun icla = run({"--config", c, "train-icla"});
  ASSERT_EQ(icla.code, kExitOk) << icla.err;
  const json report = read_json(dir / "rep" / "train_icla.json");
  EXPECT_TRUE(report.contains("base_digest"));

  ASSERT_EQ(run({"--config", c, "--quiet", "eval"}).code, kExitOk);
  ASSERT_EQ(run({"--config", c, "--quiet", "attn", "--answer-only"}).code, kExitOk);
  const std::string csv = read_bytes(dir / "rep" / "attention.csv");
  EXPECT_EQ(csv.rfind("query_layer,key_layer,mean_weight,sample_count\n", 0), 0u);
  EXPECT_TRUE(fs::exists(dir / "rep" / "attention.svg"));

  const CliRun ablate = run({"--config", c, "ablate"});
  ASSERT_EQ(ablate.code, kExitOk) << ablate.err;
  const json ab = read_json(dir / "rep" / "ablation.json");
  EXPECT_EQ(ab.dump().find("random_agg") != std::string::npos, true);
  EXPECT_TRUE(fs::exists(dir / "rep" / "ablation.csv"));

  const CliRun gen = run({"--config", c, "gen-data", "--split", "eval", "--count", "3"});
  ASSERT_EQ(gen.code, kExitOk);
  std::istringstream lines(gen.out);
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    EXPECT_TRUE(json::parse(line).contains("input_ids"));
    ++n;
  }
  EXPECT_EQ(n, 3);
}

TEST(RunConfig, DefaultsAndSeedDerivation) {
  const RunConfig a = run_config_from_json(json{{"seed", 5}});
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(a.task.vocab_size, a.model.vocab_size);
  EXPECT_EQ(a.base_train.learning_rate, a.train.learning_rate);
  EXPECT_NE(a.base_train.seed, a.train.seed);
  const RunConfig b = run_config_from_json(json{{"seed", 6}});
  EXPECT_NE(a.task.seed, b.task.seed);
  EXPECT_NE(a.task.seed, eval_task(a).seed);
  EXPECT_EQ(config_digest(a), config_digest(run_config_from_json(json{{"seed", 5}})));
  EXPECT_NE(config_digest(a), config_digest(b));
  EXPECT_THROW(run_config_from_json(json{{"sed", 5}}), ConfigError);
  try {
    run_config_from_json(json{{"paths", {{"checkpoint", "x"}}}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "paths.checkpoint");
  }
  RunConfig bad = a;
  bad.eval_examples = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

#include "icla/run_config.hpp"

#include <fstream>
#include <iterator>

#include "icla/serialization.hpp"

namespace icla {

using nlohmann::json;

namespace {

// Library validators report "section.field message"; recover the path and retarget the
// section when the same struct type lives under another key.
[[noreturn]] void rethrow_as_config_error(const std::invalid_argument& e, const std::string& from,
                                          const std::string& to) {
  std::string msg = e.what();
  if (msg.rfind(from + ".", 0) == 0) {
    msg = to + msg.substr(from.size());
  }
  const auto space = msg.find(' ');
  const std::string field = msg.substr(0, space);
  throw ConfigError(field, space == std::string::npos ? "invalid" : msg.substr(space + 1));
}

template <typename Fn>
void checked(const std::string& from, const std::string& to, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    rethrow_as_config_error(e, from, to);
  }
}

void require_positive(int value, const char* field) {
  if (value < 1) {
    throw ConfigError(field, "must be >= 1");
  }
}

void check_task_against_model(const TaskSpec& task, const ModelConfig& model,
                              const std::string& key) {
  checked("task", key, [&] { task.validate(model.max_seq_len); });
  if (task.vocab_size != model.vocab_size) {
    throw ConfigError(key + ".vocab_size", "must equal model.vocab_size (" +
                                               std::to_string(model.vocab_size) + ")");
  }
}

}  // namespace

void RunConfig::validate() const {
  checked("model", "model", [&] { model.validate(); });
  checked("icla", "icla", [&] { icla.validate(model); });
  checked("train", "train", [&] { train.validate(); });
  checked("train", "base_train", [&] { base_train.validate(); });
  check_task_against_model(task, model, "task");
  check_task_against_model(base_task, model, "base_task");
  require_positive(train_examples, "train_examples");
  require_positive(base_train_examples, "base_train_examples");
  require_positive(eval_examples, "eval_examples");
  if (checkpoints_dir.empty()) {
    throw ConfigError("paths.checkpoints", "must not be empty");
  }
  if (reports_dir.empty()) {
    throw ConfigError("paths.reports", "must not be empty");
  }
}

void RunConfig::derive_seeds() {
  task.seed = derive_seed(seed, seed_labels::kData);
  base_task.seed = derive_seed(seed, seed_labels::kBaseData);
  train.seed = derive_seed(seed, seed_labels::kTrainOrder);
  base_train.seed = derive_seed(seed, seed_labels::kBaseTrainOrder);
  icla.random_agg_seed = derive_seed(seed, seed_labels::kRandomAgg);
}

TaskSpec eval_task(const RunConfig& cfg) {
  TaskSpec spec = cfg.task;
  spec.seed = derive_seed(cfg.seed, seed_labels::kEvalData);
  return spec;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) {
    throw ConfigError("(root)", "expected a JSON object");
  }
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "model") {
      cfg.model = model_config_from_json(value, "model");
    } else if (key == "icla") {
      cfg.icla = icla_config_from_json(value, "icla");
    } else if (key == "train" || key == "base_train" || key == "task" || key == "base_task") {
      // Read below, after the primary sections.
    } else if (key == "train_examples" || key == "base_train_examples" ||
               key == "eval_examples") {
      if (!value.is_number_integer()) {
        throw ConfigError(key, "expected an integer");
      }
    } else if (key == "seed") {
      if (!value.is_number_integer() ||
          (!value.is_number_unsigned() && value.get<std::int64_t>() < 0)) {
        throw ConfigError("seed", "expected a non-negative integer");
      }
      cfg.seed = value.get<std::uint64_t>();
    } else if (key == "paths") {
      if (!value.is_object()) {
        throw ConfigError("paths", "expected a JSON object");
      }
      for (const auto& [pkey, pval] : value.items()) {
        if (pkey != "checkpoints" && pkey != "reports") {
          throw ConfigError("paths." + pkey, "unknown field");
        }
        if (!pval.is_string()) {
          throw ConfigError("paths." + pkey, "expected a string");
        }
        (pkey == "checkpoints" ? cfg.checkpoints_dir : cfg.reports_dir) = pval.get<std::string>();
      }
    } else {
      throw ConfigError(key, "unknown field");
    }
  }
  // The task follows the model vocabulary unless it says otherwise.
  cfg.task.vocab_size = cfg.model.vocab_size;
  cfg.task.seq_len = std::min(cfg.task.seq_len, cfg.model.max_seq_len);
  if (j.contains("task")) {
    cfg.task = task_spec_from_json(j["task"], "task", cfg.task);
  }
  cfg.base_task = cfg.task;
  if (j.contains("base_task")) {
    cfg.base_task = task_spec_from_json(j["base_task"], "base_task", cfg.task);
  }
  if (j.contains("train")) {
    cfg.train = train_config_from_json(j["train"], "train");
  }
  cfg.base_train = cfg.train;
  if (j.contains("base_train")) {
    cfg.base_train = train_config_from_json(j["base_train"], "base_train", cfg.train);
  }
  if (j.contains("train_examples")) cfg.train_examples = j["train_examples"].get<int>();
  if (j.contains("base_train_examples")) {
    cfg.base_train_examples = j["base_train_examples"].get<int>();
  }
  if (j.contains("eval_examples")) cfg.eval_examples = j["eval_examples"].get<int>();
  cfg.derive_seeds();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("--config", "cannot open " + path.string());
  }
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("--config", path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

json to_json(const RunConfig& cfg) {
  return {{"model", to_json(cfg.model)},
          {"icla", to_json(cfg.icla)},
          {"train", to_json(cfg.train)},
          {"base_train", to_json(cfg.base_train)},
          {"task", to_json(cfg.task)},
          {"base_task", to_json(cfg.base_task)},
          {"train_examples", cfg.train_examples},
          {"base_train_examples", cfg.base_train_examples},
          {"eval_examples", cfg.eval_examples},
          {"paths", {{"checkpoints", cfg.checkpoints_dir}, {"reports", cfg.reports_dir}}},
          {"seed", cfg.seed}};
}

std::string config_digest(const RunConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

}  // namespace icla

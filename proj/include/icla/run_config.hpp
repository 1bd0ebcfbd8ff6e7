#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "icla/cross_layer.hpp"
#include "icla/model.hpp"
#include "icla/tasks.hpp"
#include "icla/training.hpp"

namespace icla {

/// One experiment: every command reads this document.
struct RunConfig {
  ModelConfig model;
  IclaConfig icla;
  TrainConfig train;       // ICLA fine-tuning
  TrainConfig base_train;  // base-model training
  TaskSpec task;           // ICLA fine-tuning, evaluation and analysis data
  TaskSpec base_task;      // base-model training data
  int train_examples = 2000;
  int base_train_examples = 2000;
  int eval_examples = 500;
  std::string checkpoints_dir = "checkpoints";
  std::string reports_dir = "reports";
  std::uint64_t seed = 0;

  /// Cross-field checks; throws ConfigError with the offending field path.
  void validate() const;
  /// Re-derives every subsystem seed from `seed`.
  void derive_seeds();
};

/// Missing sections keep built-in defaults; base_train/base_task default to train/task.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

/// SHA-256 of the canonical JSON form.
std::string config_digest(const RunConfig& cfg);

/// Seed labels for the per-subsystem streams.
namespace seed_labels {
inline constexpr const char* kData = "data";
inline constexpr const char* kBaseData = "base-data";
inline constexpr const char* kEvalData = "eval-data";
inline constexpr const char* kModelInit = "init-model";
inline constexpr const char* kClaInit = "init-cla";
inline constexpr const char* kTrainOrder = "train-order";
inline constexpr const char* kBaseTrainOrder = "base-train-order";
inline constexpr const char* kRandomAgg = "random-agg";
}  // namespace seed_labels

/// Eval data spec: same task, independent stream.
TaskSpec eval_task(const RunConfig& cfg);

}  // namespace icla

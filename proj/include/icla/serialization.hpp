#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

#include "icla/cross_layer.hpp"
#include "icla/model.hpp"
#include "icla/tasks.hpp"
#include "icla/training.hpp"

namespace icla {

/// Invalid configuration value; `field` is a dotted path such as "icla.start_layer".
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const IclaConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const TaskSpec& spec);

// Missing keys keep the defaults of `base`; unknown keys and wrong types raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path,
                                   ModelConfig base = {});
IclaConfig icla_config_from_json(const nlohmann::json& j, const std::string& path,
                                 IclaConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path,
                                   TrainConfig base = {});
TaskSpec task_spec_from_json(const nlohmann::json& j, const std::string& path,
                             TaskSpec base = {});

}  // namespace icla

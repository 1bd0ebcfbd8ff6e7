#include "icla/serialization.hpp"

#include <set>

namespace icla {

using nlohmann::json;

namespace {

class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
      throw ConfigError(path_, "expected a JSON object");
    }
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      return;
    }
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(field(key), "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_unsigned() == false && v.get<std::int64_t>() < 0) {
            throw ConfigError(field(key), "expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(field(key), "expected a number");
      } else {
        if (!v.is_string()) throw ConfigError(field(key), "expected a string");
      }
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(field(key), e.what());
    }
  }

  void read_optional(const char* key, std::optional<double>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      return;
    }
    const json& v = j_.at(key);
    if (v.is_null()) {
      out.reset();
    } else if (v.is_number()) {
      out = v.get<double>();
    } else {
      throw ConfigError(field(key), "expected a number or null");
    }
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void reject_unknown() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) {
        throw ConfigError(field(key), "unknown field");
      }
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

json to_json(const ModelConfig& cfg) {
  return {{"num_layers", cfg.num_layers}, {"hidden_dim", cfg.hidden_dim},
          {"num_heads", cfg.num_heads},   {"mlp_dim", cfg.mlp_dim},
          {"vocab_size", cfg.vocab_size}, {"max_seq_len", cfg.max_seq_len}};
}

json to_json(const IclaConfig& cfg) {
  return {{"enabled", cfg.enabled},
          {"start_layer", cfg.start_layer},
          {"reduction_ratio", cfg.reduction_ratio},
          {"alpha", cfg.alpha},
          {"eps", cfg.eps},
          {"variant", to_string(cfg.variant)},
          {"random_agg_prob", cfg.random_agg_prob},
          {"random_agg_seed", cfg.random_agg_seed},
          {"cache_pre_refinement", cfg.cache_pre_refinement}};
}

json to_json(const TrainConfig& cfg) {
  json j = {{"learning_rate", cfg.learning_rate}, {"epochs", cfg.epochs},
            {"batch_size", cfg.batch_size},       {"adam_beta1", cfg.adam_beta1},
            {"adam_beta2", cfg.adam_beta2},       {"adam_eps", cfg.adam_eps},
            {"seed", cfg.seed}};
  j["grad_clip"] = cfg.grad_clip ? json(*cfg.grad_clip) : json(nullptr);
  return j;
}

json to_json(const TaskSpec& spec) {
  return {{"kind", to_string(spec.kind)},   {"vocab_size", spec.vocab_size},
          {"seq_len", spec.seq_len},        {"num_pairs", spec.num_pairs},
          {"conflict_rate", spec.conflict_rate}, {"seed", spec.seed},
          {"corpus_path", spec.corpus_path}};
}

ModelConfig model_config_from_json(const json& j, const std::string& path, ModelConfig cfg) {
  FieldReader r(j, path);
  r.read("num_layers", cfg.num_layers);
  r.read("hidden_dim", cfg.hidden_dim);
  r.read("num_heads", cfg.num_heads);
  r.read("mlp_dim", cfg.mlp_dim);
  r.read("vocab_size", cfg.vocab_size);
  r.read("max_seq_len", cfg.max_seq_len);
  r.reject_unknown();
  return cfg;
}

IclaConfig icla_config_from_json(const json& j, const std::string& path, IclaConfig cfg) {
  FieldReader r(j, path);
  r.read("enabled", cfg.enabled);
  r.read("start_layer", cfg.start_layer);
  r.read("reduction_ratio", cfg.reduction_ratio);
  r.read("alpha", cfg.alpha);
  r.read("eps", cfg.eps);
  std::string variant = to_string(cfg.variant);
  r.read("variant", variant);
  try {
    cfg.variant = parse_variant(variant);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.field("variant"), e.what());
  }
  r.read("random_agg_prob", cfg.random_agg_prob);
  r.read("random_agg_seed", cfg.random_agg_seed);
  r.read("cache_pre_refinement", cfg.cache_pre_refinement);
  r.reject_unknown();
  return cfg;
}

TrainConfig train_config_from_json(const json& j, const std::string& path, TrainConfig cfg) {
  FieldReader r(j, path);
  r.read("learning_rate", cfg.learning_rate);
  r.read("epochs", cfg.epochs);
  r.read("batch_size", cfg.batch_size);
  r.read("adam_beta1", cfg.adam_beta1);
  r.read("adam_beta2", cfg.adam_beta2);
  r.read("adam_eps", cfg.adam_eps);
  r.read_optional("grad_clip", cfg.grad_clip);
  r.read("seed", cfg.seed);
  r.reject_unknown();
  return cfg;
}

TaskSpec task_spec_from_json(const json& j, const std::string& path, TaskSpec spec) {
  FieldReader r(j, path);
  std::string kind = to_string(spec.kind);
  r.read("kind", kind);
  try {
    spec.kind = parse_task_kind(kind);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.field("kind"), e.what());
  }
  r.read("vocab_size", spec.vocab_size);
  r.read("seq_len", spec.seq_len);
  r.read("num_pairs", spec.num_pairs);
  r.read("conflict_rate", spec.conflict_rate);
  r.read("seed", spec.seed);
  r.read("corpus_path", spec.corpus_path);
  r.reject_unknown();
  return spec;
}

}  // namespace icla

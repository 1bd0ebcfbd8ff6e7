#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "icla/cross_layer.hpp"
#include "icla/model.hpp"
#include "icla/tasks.hpp"

namespace icla {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitValidation = 2,
  kExitRuntime = 3,
};

struct EvalMetrics {
  double loss = 0.0;      // mean per-example cross-entropy over masked positions
  double accuracy = 0.0;  // argmax hits over all masked positions
  std::optional<double> conflict_accuracy;
  std::size_t positions = 0;
  std::size_t conflict_positions = 0;
};

/// Scores each example with teacher forcing: the argmax at a masked position is the token
/// greedy decoding would emit there.
EvalMetrics evaluate(const LogitsFn& logits_fn, const std::vector<Example>& data);
/// cla == nullptr evaluates the plain model.
EvalMetrics evaluate(const TransformerParams& model, const ClaParams* cla, const IclaConfig& cfg,
                     const std::vector<Example>& data);

nlohmann::json metrics_json(const EvalMetrics& m, std::uint64_t seed,
                            const std::string& config_digest);

struct CliHooks {
  /// Replaces the model's logits in `eval` when set.
  LogitsFn logits_override;
};

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
            const CliHooks& hooks = {});

}  // namespace icla

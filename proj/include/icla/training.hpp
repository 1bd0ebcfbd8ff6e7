#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "icla/cross_layer.hpp"
#include "icla/model.hpp"
#include "icla/tasks.hpp"

namespace icla {

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 3;
  int batch_size = 8;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> grad_clip;  // global L2 norm
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Learning rate used for 7B-scale fine-tuning, kept for runs that mirror that setting.
inline constexpr double kReferenceLearningRate = 2e-5;

/// Mean over masked positions of -log softmax(logits[t])[targets[t]].
double lm_loss(const Tensor& logits, const TokenSequence& targets, const std::vector<bool>& mask);
/// Gradient of lm_loss with respect to the logits, scaled by `scale`.
Tensor lm_loss_grad(const Tensor& logits, const TokenSequence& targets,
                    const std::vector<bool>& mask, double scale = 1.0);

/// Mean lm_loss over the batch with ICLA attached.
double batch_loss(const TransformerParams& model, const ClaParams& cla, const IclaConfig& cfg,
                  const Batch& batch);
/// Mean lm_loss over the batch for the plain model.
double batch_loss(const TransformerParams& model, const Batch& batch);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ClaGradients {
  double loss = 0.0;
  ClaParams grads;
};

/// Exact reverse-mode gradient of the mean batch loss with respect to the CLA
/// parameters only. The base model is read, never written.
ClaGradients backward_cla_only(const TransformerParams& model, const ClaParams& cla,
                               const IclaConfig& cfg, const Batch& batch);

struct ModelGradients {
  double loss = 0.0;
  TransformerParams grads;  // same layout as the model, used as an accumulator
};

/// Gradient of the mean batch loss with respect to every base-model weight (no ICLA).
ModelGradients backward_model(const TransformerParams& model, const Batch& batch);

/// Adam moments for an ordered list of tensors.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

AdamState adam_init(const std::vector<const Tensor*>& params);

/// One bias-corrected Adam update, in place.
void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
               AdamState& state, const TrainConfig& cfg);
void adam_step(ClaParams& params, const ClaParams& grads, AdamState& state,
               const TrainConfig& cfg);

/// SHA-256 hex digest over every base parameter value.
std::string params_digest(const TransformerParams& params);
std::string params_digest(const ClaParams& params);
/// SHA-256 hex digest of raw bytes.
std::string sha256_hex(std::string_view bytes);

struct TrainResult {
  ClaParams params;
  std::vector<double> loss_history;  // one entry per optimizer step
  std::string base_digest;
};

/// Thrown when a step produces a non-finite loss; carries the last finite parameters.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, ClaParams last_good, std::vector<double> history)
      : std::runtime_error(what), last_good(std::move(last_good)), history(std::move(history)) {}
  ClaParams last_good;
  std::vector<double> history;
};

/// Groups examples into batches in a per-epoch shuffled order seeded by cfg.seed.
std::vector<Batch> epoch_batches(const std::vector<Example>& dataset, const TrainConfig& cfg,
                                 int epoch);

/// Freeze-base fine-tuning of the CLA parameters.
TrainResult train_loop(const TransformerParams& model, const ClaParams& init,
                       const IclaConfig& icla_cfg, const TrainConfig& cfg,
                       const std::vector<Example>& dataset);

struct BaseTrainResult {
  TransformerParams params;
  std::vector<double> loss_history;
};

/// Full-parameter training of the base model without ICLA.
BaseTrainResult train_base(const TransformerParams& init, const TrainConfig& cfg,
                           const std::vector<Example>& dataset);

}  // namespace icla

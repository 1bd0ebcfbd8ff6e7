#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "icla/cross_layer.hpp"
#include "icla/model.hpp"
#include "icla/training.hpp"

namespace icla {

// Layout, all integers little-endian:
//   "ICLA" | u32 version | u32 header_len | header JSON (UTF-8) | f32 payloads
// The header is {model_config, icla_config, train_config, tensor_manifest}; each manifest
// entry is {name, shape, offset} with offset counted in bytes from the payload start.
// Payloads follow manifest order back to back.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  ModelConfig model_config;
  IclaConfig icla_config;
  TrainConfig train_config;
  std::vector<NamedTensor> tensors;
};

/// Malformed checkpoint; `offset` is the byte position where decoding failed.
class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(const std::string& message, std::size_t offset)
      : std::runtime_error(message + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const TransformerParams& model, const ClaParams& cla,
                           const IclaConfig& icla_cfg, const TrainConfig& train_cfg);
const Tensor& find_tensor(const Checkpoint& ckpt, const std::string& name);
TransformerParams model_from_checkpoint(const Checkpoint& ckpt);
ClaParams cla_from_checkpoint(const Checkpoint& ckpt);

}  // namespace icla

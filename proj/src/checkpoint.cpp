#include "icla/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "icla/serialization.hpp"

namespace icla {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'I', 'C', 'L', 'A'};
constexpr std::size_t kPreambleSize = 12;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
}

std::uint32_t get_u32(std::string_view bytes, std::size_t pos) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  }
  return v;
}

Shape shape_from_json(const json& j, std::size_t pos) {
  if (!j.is_array() || j.empty()) {
    throw CheckpointError("manifest shape must be a non-empty array", pos);
  }
  Shape shape;
  for (const json& d : j) {
    if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) {
      throw CheckpointError("manifest shape entries must be positive integers", pos);
    }
    shape.push_back(d.get<std::size_t>());
  }
  return shape;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  json manifest = json::array();
  std::size_t offset = 0;
  for (const NamedTensor& nt : ckpt.tensors) {
    manifest.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}, {"offset", offset}});
    offset += nt.tensor.size() * sizeof(float);
  }
  const json header = {{"model_config", to_json(ckpt.model_config)},
                       {"icla_config", to_json(ckpt.icla_config)},
                       {"train_config", to_json(ckpt.train_config)},
                       {"tensor_manifest", manifest}};
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  out.reserve(out.size() + offset);
  for (const NamedTensor& nt : ckpt.tensors) {
    for (double v : nt.tensor.data()) {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < kPreambleSize) {
    throw CheckpointError("truncated preamble", bytes.size());
  }
  if (bytes.substr(0, 4) != std::string_view(kMagic, 4)) {
    throw CheckpointError("bad magic bytes", 0);
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported format version " + std::to_string(version) +
                              " (expected " + std::to_string(kCheckpointVersion) + ")",
                          4);
  }
  const std::size_t header_len = get_u32(bytes, 8);
  if (bytes.size() < kPreambleSize + header_len) {
    throw CheckpointError("truncated header: " + std::to_string(header_len) + " bytes declared",
                          bytes.size());
  }
  json header;
  try {
    header = json::parse(bytes.substr(kPreambleSize, header_len));
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("malformed header JSON: ") + e.what(),
                          kPreambleSize + e.byte);
  }

  Checkpoint ckpt;
  try {
    ckpt.model_config = model_config_from_json(header.at("model_config"), "model_config");
    ckpt.icla_config = icla_config_from_json(header.at("icla_config"), "icla_config");
    ckpt.train_config = train_config_from_json(header.at("train_config"), "train_config");
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("invalid header: ") + e.what(), kPreambleSize);
  }
  if (!header.contains("tensor_manifest") || !header["tensor_manifest"].is_array()) {
    throw CheckpointError("header lacks a tensor_manifest array", kPreambleSize);
  }

  const std::size_t payload_start = kPreambleSize + header_len;
  std::size_t expected_offset = 0;
  for (const json& entry : header["tensor_manifest"]) {
    if (!entry.is_object() || !entry.contains("name") || !entry["name"].is_string() ||
        !entry.contains("shape") || !entry.contains("offset") ||
        !entry["offset"].is_number_unsigned()) {
      throw CheckpointError("malformed manifest entry", kPreambleSize);
    }
    const std::string name = entry["name"].get<std::string>();
    Shape shape = shape_from_json(entry["shape"], kPreambleSize);
    const auto offset = entry["offset"].get<std::size_t>();
    if (offset != expected_offset) {
      throw CheckpointError("manifest entry '" + name + "' has offset " + std::to_string(offset) +
                                ", expected " + std::to_string(expected_offset),
                            kPreambleSize);
    }
    std::size_t count = 1;
    for (std::size_t d : shape) {
      count *= d;
    }
    const std::size_t begin = payload_start + offset;
    const std::size_t end = begin + count * sizeof(float);
    if (end > bytes.size()) {
      throw CheckpointError("truncated payload for tensor '" + name + "'", bytes.size());
    }
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      data[i] = static_cast<double>(
          std::bit_cast<float>(get_u32(bytes, begin + i * sizeof(float))));
    }
    ckpt.tensors.push_back({name, Tensor(std::move(shape), std::move(data))});
    expected_offset += count * sizeof(float);
  }
  if (payload_start + expected_offset != bytes.size()) {
    throw CheckpointError("trailing bytes after the last payload", payload_start + expected_offset);
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw std::runtime_error("failed writing checkpoint " + path.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open checkpoint " + path.string());
  }
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_checkpoint(bytes);
}

Checkpoint make_checkpoint(const TransformerParams& model, const ClaParams& cla,
                           const IclaConfig& icla_cfg, const TrainConfig& train_cfg) {
  Checkpoint ckpt{model.config, icla_cfg, train_cfg, {}};
  for (const auto& [name, t] : model.named_tensors()) {
    ckpt.tensors.push_back({name, *t});
  }
  for (const auto& [name, t] : cla.named_tensors()) {
    ckpt.tensors.push_back({name, *t});
  }
  return ckpt;
}

const Tensor& find_tensor(const Checkpoint& ckpt, const std::string& name) {
  for (const NamedTensor& nt : ckpt.tensors) {
    if (nt.name == name) {
      return nt.tensor;
    }
  }
  throw std::invalid_argument("checkpoint has no tensor named '" + name + "'");
}

namespace {

void assign_checked(Tensor& dst, const Tensor& src, const std::string& name) {
  if (!dst.same_shape(src)) {
    throw std::invalid_argument("checkpoint tensor '" + name + "' has shape " +
                                shape_string(src.shape()) + ", expected " +
                                shape_string(dst.shape()));
  }
  dst = src;
}

}  // namespace

TransformerParams model_from_checkpoint(const Checkpoint& ckpt) {
  TransformerParams model = TransformerParams::zeros(ckpt.model_config);
  for (auto& [name, t] : model.named_tensors()) {
    assign_checked(*t, find_tensor(ckpt, name), name);
  }
  return model;
}

ClaParams cla_from_checkpoint(const Checkpoint& ckpt) {
  ckpt.icla_config.validate(ckpt.model_config);
  SeededRng unused(0);
  ClaParams cla = init_cla_params(ckpt.icla_config, ckpt.model_config.hidden_dim, unused);
  for (auto& [name, t] : cla.named_tensors()) {
    assign_checked(*t, find_tensor(ckpt, name), name);
  }
  return cla;
}

}  // namespace icla

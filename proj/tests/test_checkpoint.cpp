#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>

#include <json.hpp>

#include "helpers.hpp"
#include "icla/checkpoint.hpp"
#include "icla/serialization.hpp"

using namespace icla;
using nlohmann::json;

namespace {

// Values already representable in 32 bits survive the float payload exactly.
Tensor float_exact(SeededRng& rng, Shape shape) {
  Tensor t = rand_normal(rng, std::move(shape), 1.0);
  for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  return t;
}

Checkpoint sample_checkpoint(std::uint64_t seed) {
  SeededRng rng(seed);
  Checkpoint c;
  c.model_config.num_layers = 2 + static_cast<int>(rng.uniform_int(3));
  c.icla_config.alpha = rng.uniform();
  c.icla_config.variant = static_cast<IclaVariant>(rng.uniform_int(3));
  c.train_config.learning_rate = rng.uniform();
  if (rng.uniform() < 0.5) c.train_config.grad_clip = 1.0 + rng.uniform();
  const std::size_t n = 1 + rng.uniform_int(5);
  for (std::size_t i = 0; i < n; ++i) {
    Shape shape;
    const std::size_t rank = 1 + rng.uniform_int(3);
    for (std::size_t r = 0; r < rank; ++r) shape.push_back(1 + rng.uniform_int(6));
    c.tensors.push_back({"t" + std::to_string(i), float_exact(rng, shape)});
  }
  return c;
}

void expect_same(const Checkpoint& a, const Checkpoint& b) {
  EXPECT_EQ(a.model_config, b.model_config);
  EXPECT_EQ(a.icla_config, b.icla_config);
  EXPECT_EQ(a.train_config, b.train_config);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    EXPECT_EQ(a.tensors[i].name, b.tensors[i].name);
    EXPECT_EQ(a.tensors[i].tensor, b.tensors[i].tensor);
  }
}

std::size_t header_end(const std::string& bytes) {
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 4);
  return 12 + len;
}

std::string with_header(const std::string& bytes, const json& header) {
  const std::string text = header.dump();
  std::string out = bytes.substr(0, 8);
  const auto len = static_cast<std::uint32_t>(text.size());
  out.append(reinterpret_cast<const char*>(&len), 4);
  out += text;
  out += bytes.substr(header_end(bytes));
  return out;
}

}  // namespace

TEST(Checkpoint, RoundTripsBitExactly) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Checkpoint c = sample_checkpoint(seed);
    const std::string bytes = serialize_checkpoint(c);
    const Checkpoint back = parse_checkpoint(bytes);
    expect_same(c, back);
    EXPECT_EQ(serialize_checkpoint(back), bytes);
  }
}

TEST(Checkpoint, LayoutIsLittleEndianWithMagic) {
  Checkpoint c;
  c.tensors.push_back({"x", Tensor({1}, {1.0})});
  const std::string bytes = serialize_checkpoint(c);
  EXPECT_EQ(bytes.substr(0, 4), "ICLA");
  EXPECT_EQ(bytes.substr(4, 4), std::string("\x01\x00\x00\x00", 4));
  // 1.0f = 0x3f800000
  EXPECT_EQ(bytes.substr(bytes.size() - 4), std::string("\x00\x00\x80\x3f", 4));
  const json header = json::parse(bytes.substr(12, header_end(bytes) - 12));
  for (const char* key : {"model_config", "icla_config", "train_config", "tensor_manifest"}) {
    EXPECT_TRUE(header.contains(key)) << key;
  }
}

TEST(Checkpoint, DoublesAreTruncatedToFloat) {
  Checkpoint c;
  c.tensors.push_back({"x", Tensor({2}, {0.1, 1.0 / 3.0})});
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(c));
  EXPECT_EQ(back.tensors[0].tensor[0], static_cast<double>(0.1f));
  EXPECT_EQ(back.tensors[0].tensor[1], static_cast<double>(1.0f / 3.0f));
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = testutil::scratch_dir("ckpt");
  const Checkpoint c = sample_checkpoint(7);
  save_checkpoint(dir / "a.ckpt", c);
  expect_same(c, load_checkpoint(dir / "a.ckpt"));
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
}

TEST(Checkpoint, RejectsCorruption) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint(3));
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    parse_checkpoint(bad_magic);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  std::string bad_version = bytes;
  bad_version[4] = 2;
  try {
    parse_checkpoint(bad_version);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{11}, header_end(bytes) - 1,
                          bytes.size() - 1}) {
    EXPECT_THROW(parse_checkpoint(bytes.substr(0, cut)), CheckpointError) << cut;
  }
  EXPECT_THROW(parse_checkpoint(bytes + "x"), CheckpointError);
  std::string bad_json = bytes;
  bad_json[12] = '#';
  EXPECT_THROW(parse_checkpoint(bad_json), CheckpointError);
}

TEST(Checkpoint, ManifestOrderDefinesPayloadOrder) {
  Checkpoint c;
  SeededRng rng(5);
  c.tensors.push_back({"b", float_exact(rng, {2, 3})});
  c.tensors.push_back({"a", float_exact(rng, {4})});
  c.tensors.push_back({"c", float_exact(rng, {1, 1})});
  Checkpoint permuted = c;
  std::swap(permuted.tensors[0], permuted.tensors[2]);
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(permuted));
  expect_same(permuted, back);
  EXPECT_EQ(find_tensor(back, "a"), c.tensors[1].tensor);
  EXPECT_THROW(find_tensor(back, "zz"), std::invalid_argument);
}

TEST(Checkpoint, RejectsInconsistentManifest) {
  Checkpoint c;
  c.tensors.push_back({"a", Tensor({2}, {1, 2})});
  c.tensors.push_back({"b", Tensor({2}, {3, 4})});
  const std::string bytes = serialize_checkpoint(c);
  json header = json::parse(bytes.substr(12, header_end(bytes) - 12));
  json gap = header;
  gap["tensor_manifest"][1]["offset"] = 12;
  EXPECT_THROW(parse_checkpoint(with_header(bytes, gap)), CheckpointError);
  json zero_dim = header;
  zero_dim["tensor_manifest"][0]["shape"] = json::array({0});
  EXPECT_THROW(parse_checkpoint(with_header(bytes, zero_dim)), CheckpointError);
  json missing = header;
  missing.erase("tensor_manifest");
  EXPECT_THROW(parse_checkpoint(with_header(bytes, missing)), CheckpointError);
  json bad_cfg = header;
  bad_cfg["icla_config"]["variant"] = "nope";
  EXPECT_THROW(parse_checkpoint(with_header(bytes, bad_cfg)), CheckpointError);
  EXPECT_NO_THROW(parse_checkpoint(with_header(bytes, header)));
}

TEST(Checkpoint, ModelAndClaRestore) {
  const ModelConfig m{2, 8, 2, 8, 10, 8};
  IclaConfig ic;
  ic.start_layer = 1;
  ic.reduction_ratio = 2;
  TransformerParams model = testutil::random_model(m, 1, 0.3);
  ClaParams cla = testutil::random_cla(ic, 8, 2, 0.3);
  const Checkpoint c = parse_checkpoint(serialize_checkpoint(make_checkpoint(model, cla, ic, {})));
  const TransformerParams mb = model_from_checkpoint(c);
  const ClaParams cb = cla_from_checkpoint(c);
  EXPECT_EQ(mb.layers[1].w_up[3], static_cast<double>(static_cast<float>(model.layers[1].w_up[3])));
  EXPECT_EQ(cb.w_out[5], static_cast<double>(static_cast<float>(cla.w_out[5])));

  Checkpoint wrong = c;
  for (NamedTensor& nt : wrong.tensors)
    if (nt.name == "cla.w_q") nt.tensor = Tensor({8, 3});
  EXPECT_THROW(cla_from_checkpoint(wrong), std::invalid_argument);
}

TEST(Serialization, ConfigsRoundTripAndRejectUnknownFields) {
  IclaConfig ic;
  ic.variant = IclaVariant::LastOnly;
  ic.cache_pre_refinement = true;
  EXPECT_EQ(icla_config_from_json(to_json(ic), "icla"), ic);
  TrainConfig tc;
  tc.grad_clip = 2.0;
  EXPECT_EQ(train_config_from_json(to_json(tc), "train"), tc);
  TaskSpec ts;
  ts.kind = TaskKind::Copy;
  EXPECT_EQ(task_spec_from_json(to_json(ts), "task"), ts);
  ModelConfig mc;
  mc.hidden_dim = 32;
  EXPECT_EQ(model_config_from_json(to_json(mc), "model"), mc);

  try {
    icla_config_from_json(json{{"alhpa", 0.1}}, "icla");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "icla.alhpa");
  }
  try {
    model_config_from_json(json{{"num_layers", "four"}}, "model");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "model.num_layers");
  }
}

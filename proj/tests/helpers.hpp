#pragma once

#include <filesystem>
#include <string>

#include "icla/cross_layer.hpp"
#include "icla/model.hpp"
#include "icla/numerics.hpp"

namespace testutil {

/// Every weight ~ N(0, std^2); norm gains ~ 1 + N(0, 0.1^2) so gain paths are exercised.
inline icla::TransformerParams random_model(const icla::ModelConfig& cfg, std::uint64_t seed,
                                            double stddev) {
  icla::SeededRng rng(seed);
  icla::TransformerParams p = icla::TransformerParams::init(cfg, rng);
  for (auto& [name, t] : p.named_tensors()) {
    const bool norm = name.ends_with("_norm");
    const icla::Tensor noise = icla::rand_normal(rng, t->shape(), norm ? 0.1 : stddev);
    for (std::size_t i = 0; i < t->size(); ++i) {
      (*t)[i] = (norm ? 1.0 : 0.0) + noise[i];
    }
  }
  return p;
}

/// CLA parameters with a non-zero output projection.
inline icla::ClaParams random_cla(const icla::IclaConfig& cfg, int hidden_dim, std::uint64_t seed,
                                  double stddev) {
  icla::SeededRng rng(seed);
  icla::ClaParams p = icla::init_cla_params(cfg, hidden_dim, rng);
  for (auto& [name, t] : p.named_tensors()) {
    const bool gain = name == "cla.norm_gain";
    const icla::Tensor noise = icla::rand_normal(rng, t->shape(), gain ? 0.1 : stddev);
    for (std::size_t i = 0; i < t->size(); ++i) {
      (*t)[i] = (gain ? 1.0 : 0.0) + noise[i];
    }
  }
  return p;
}

inline icla::TokenSequence random_sequence(icla::SeededRng& rng, int vocab, std::size_t length) {
  icla::TokenSequence s(length);
  for (int& tok : s) tok = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(vocab)));
  return s;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("icla_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil

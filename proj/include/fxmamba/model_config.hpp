/* Copyright 2026 The fxmamba Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "fxmamba/error.hpp"

namespace fxm {

// Mamba2 model shape. JSON keys match the field names.
struct ModelConfig {
  std::size_t n_layers = 1;
  std::size_t d_model = 64;
  std::size_t expand = 2;
  std::size_t n_heads = 2;
  std::size_t head_dim = 64;
  std::size_t d_state = 16;
  std::size_t n_groups = 1;
  std::size_t d_conv = 4;
  std::size_t vocab_size = 0;  // 0: hidden vectors in, hidden vectors out
  double rms_eps = 1e-5;
  std::size_t hadamard_group = 64;  // target group width d/m for the quantized linears
  bool final_norm = true;

  std::size_t d_inner() const { return expand * d_model; }
  std::size_t bc_width() const { return n_groups * d_state; }
  std::size_t conv_channels() const { return d_inner() + 2 * bc_width(); }
  std::size_t in_proj_out() const { return 2 * d_inner() + 2 * bc_width() + n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  require(c.d_model > 0 && c.expand > 0 && c.n_heads > 0 && c.head_dim > 0 && c.d_state > 0 && c.n_groups > 0 &&
              c.d_conv > 0 && c.hadamard_group > 0,
          Errc::invalid_argument, "model dimensions must be positive");
  require(c.expand * c.d_model == c.n_heads * c.head_dim, Errc::invalid_argument,
          "expand * d_model must equal n_heads * head_dim");
  require(c.n_heads % c.n_groups == 0, Errc::invalid_argument, "n_heads must be a multiple of n_groups");
  require(c.rms_eps >= 0.0, Errc::invalid_argument, "rms_eps must be non-negative");
}

namespace detail {

inline const std::set<std::string>& config_keys() {
  static const std::set<std::string> keys{"n_layers", "d_model",   "expand",     "n_heads",
                                          "head_dim", "d_state",   "n_groups",   "d_conv",
                                          "vocab_size", "rms_eps", "hadamard_group", "final_norm"};
  return keys;
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},   {"expand", c.expand},
          {"n_heads", c.n_heads},   {"head_dim", c.head_dim}, {"d_state", c.d_state},
          {"n_groups", c.n_groups}, {"d_conv", c.d_conv},     {"vocab_size", c.vocab_size},
          {"rms_eps", c.rms_eps},   {"hadamard_group", c.hadamard_group}, {"final_norm", c.final_norm}};
}

// n_layers, d_model, n_heads, head_dim and d_state are required; the rest
// fall back to the defaults above. Unknown keys are rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), Errc::invalid_argument, "model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    require(detail::config_keys().contains(key), Errc::invalid_argument, "unknown model config key: " + key);
  }
  for (const char* key : {"n_layers", "d_model", "n_heads", "head_dim", "d_state"}) {
    require(j.contains(key), Errc::invalid_argument, std::string("model config is missing ") + key);
  }
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      using T = std::remove_reference_t<decltype(field)>;
      if constexpr (std::is_same_v<T, std::size_t>) {
        require(j.at(key).is_number_integer() && j.at(key).template get<std::int64_t>() >= 0, Errc::invalid_argument,
                std::string("model config key ") + key + " must be a non-negative integer");
      }
      field = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      fail(Errc::invalid_argument, std::string("model config key ") + key + " has the wrong type");
    }
  };
  get("n_layers", c.n_layers);
  get("d_model", c.d_model);
  get("expand", c.expand);
  get("n_heads", c.n_heads);
  get("head_dim", c.head_dim);
  get("d_state", c.d_state);
  get("n_groups", c.n_groups);
  get("d_conv", c.d_conv);
  get("vocab_size", c.vocab_size);
  get("rms_eps", c.rms_eps);
  get("hadamard_group", c.hadamard_group);
  get("final_norm", c.final_norm);
  validate(c);
  return c;
}

inline ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::invalid_argument, "malformed JSON in " + path.string() + ": " + e.what());
  }
  return model_config_from_json(j);
}

inline void save_model_config(const ModelConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write " + path.string());
  out << to_json(c).dump(2) << '\n';
}

}  // namespace fxm

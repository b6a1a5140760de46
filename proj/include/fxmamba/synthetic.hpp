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

// Deterministic random Mamba2 weights and inputs for tests, fixtures and
// demos. Scales follow the usual initialization: linears ~ N(0, 1/fan_in),
// A = -U[1, 16], softplus(dt_bias) log-uniform in [1e-3, 1e-1].

#include <cmath>
#include <cstdint>

#include "fxmamba/mamba_model.hpp"
#include "fxmamba/random.hpp"

namespace fxm {

struct SyntheticOptions {
  double outlier_fraction = 0.0;  // input channels of in_proj whose inputs get scaled
  double outlier_scale = 1.0;     // applied to norm weights of the outlier channels
};

inline BlockWeights random_block(const ModelConfig& c, Rng& rng, const SyntheticOptions& opt = {}) {
  BlockWeights b;
  b.norm.resize(c.d_model);
  for (double& v : b.norm) v = 1.0 + 0.1 * rng.normal();
  if (opt.outlier_fraction > 0.0) {
    const auto n = static_cast<std::size_t>(std::ceil(opt.outlier_fraction * static_cast<double>(c.d_model)));
    for (std::size_t k = 0; k < n; ++k) b.norm[rng.index(c.d_model)] *= opt.outlier_scale;
  }
  b.in_proj = rng.normal_matrix(c.in_proj_out(), c.d_model, 1.0 / std::sqrt(static_cast<double>(c.d_model)));
  b.conv_w = MatrixD(c.conv_channels(), c.d_conv);
  for (double& v : b.conv_w.data()) v = rng.uniform(-0.5, 0.5);
  b.conv_b.resize(c.conv_channels());
  for (double& v : b.conv_b) v = rng.uniform(-0.1, 0.1);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    b.ssm.A.push_back(-rng.uniform(1.0, 16.0));
    b.ssm.D.push_back(rng.uniform(0.5, 1.5));
    const double dt0 = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    b.ssm.dt_bias.push_back(dt0 + std::log(-std::expm1(-dt0)));
  }
  b.gate_norm.resize(c.d_inner());
  for (double& v : b.gate_norm) v = 1.0 + 0.1 * rng.normal();
  b.out_proj = rng.normal_matrix(c.d_model, c.d_inner(), 1.0 / std::sqrt(static_cast<double>(c.d_inner())));
  return b;
}

// Weights are rounded to f32 so the model equals its FMW round trip.
inline FloatModel random_float_model(const ModelConfig& c, std::uint64_t seed, const SyntheticOptions& opt = {}) {
  validate(c);
  Rng rng(seed);
  FloatModel m;
  m.cfg = c;
  if (c.vocab_size > 0) m.embedding = rng.normal_matrix(c.vocab_size, c.d_model);
  for (std::size_t i = 0; i < c.n_layers; ++i) m.layers.push_back(random_block(c, rng, opt));
  if (c.final_norm) {
    m.norm_f.resize(c.d_model);
    for (double& v : m.norm_f) v = 1.0 + 0.1 * rng.normal();
  }
  auto round = [](auto& range) {
    for (double& v : range) v = static_cast<float>(v);
  };
  round(m.embedding.data());
  round(m.norm_f);
  for (BlockWeights& b : m.layers) {
    round(b.norm);
    round(b.in_proj.data());
    round(b.conv_w.data());
    round(b.conv_b);
    round(b.ssm.A);
    round(b.ssm.D);
    round(b.ssm.dt_bias);
    round(b.gate_norm);
    round(b.out_proj.data());
  }
  return m;
}

inline ModelInput random_input(const ModelConfig& c, std::size_t L, std::uint64_t seed) {
  Rng rng(seed);
  if (c.vocab_size > 0) {
    std::vector<std::int64_t> t(L);
    for (auto& v : t) v = static_cast<std::int64_t>(rng.index(c.vocab_size));
    return ModelInput::from_tokens(std::move(t));
  }
  MatrixD h = rng.normal_matrix(L, c.d_model);
  for (double& v : h.data()) v = static_cast<float>(v);
  return ModelInput::from_hidden(std::move(h));
}

}  // namespace fxm

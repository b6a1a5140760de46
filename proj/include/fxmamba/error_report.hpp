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

// Quantization error analysis: a float model against a second weight set
// (quantized or float) on the same input, per layer and end to end, plus a
// per-linear comparison of the rotated W8A8 scheme with plain W8A8.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "fxmamba/mamba_model.hpp"

namespace fxm {

struct ErrorMetrics {
  double rel_l2 = 0.0;
  double cosine = 1.0;
  double max_abs = 0.0;
};

inline ErrorMetrics compare_outputs(const MatrixD& ref, const MatrixD& test) {
  require(ref.rows() == test.rows() && ref.cols() == test.cols(), Errc::shape_mismatch, "compared outputs differ in shape");
  double dd = 0.0, rr = 0.0, tt = 0.0, rt = 0.0, mx = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double r = ref.data()[i], t = test.data()[i], d = t - r;
    dd += d * d;
    rr += r * r;
    tt += t * t;
    rt += r * t;
    mx = std::max(mx, std::abs(d));
  }
  ErrorMetrics m;
  m.rel_l2 = rr == 0.0 ? std::sqrt(dd) : std::sqrt(dd / rr);
  if (rr == 0.0 || tt == 0.0) {
    m.cosine = (rr == 0.0 && tt == 0.0) ? 1.0 : 0.0;
  } else {
    m.cosine = rt / std::sqrt(rr * tt);
  }
  m.max_abs = mx;
  return m;
}

struct LinearError {
  std::string name;
  double hadamard_rel_l2 = 0.0;  // rotated W8A8, dynamic activation scale
  double plain_rel_l2 = 0.0;     // per-tensor W8A8 without rotation
};

struct LayerReport {
  ErrorMetrics metrics;  // residual stream after the layer
  std::vector<LinearError> linears;
};

struct ErrorReport {
  std::size_t positions = 0;
  bool quantized = false;
  std::vector<LayerReport> layers;
  ErrorMetrics end_to_end;
  RunStats stats;
};

inline LinearError linear_error(std::string name, const MatrixD& x, const MatrixD& w, const ModelConfig& c,
                                unsigned threads) {
  const MatrixD ref = linear_ref(x, w, threads);
  const QuantLinearLayer q = make_quant_linear(w, linear_groups(w.cols(), c));
  LinearError e;
  e.name = std::move(name);
  e.hadamard_rel_l2 = compare_outputs(ref, quantized_linear(x, q, ActScaling::dynamic, threads)).rel_l2;
  e.plain_rel_l2 = compare_outputs(ref, plain_w8a8_linear(x, w)).rel_l2;
  return e;
}

template <typename Block>
ErrorReport error_report(const FloatModel& f, const Model<Block>& other, const ModelInput& in, const RunOptions& opt = {}) {
  require(f.cfg == other.cfg, Errc::invalid_argument, "weight sets use different configs");
  const ModelConfig& c = f.cfg;
  ErrorReport rep;
  rep.positions = in.length(c);
  rep.quantized = std::is_same_v<Block, QuantBlock>;
  const PrefillResult test = model_prefill(other, in, opt, true);
  rep.stats = test.output.stats;

  MatrixD h = embed(f, in);
  for (std::size_t i = 0; i < f.layers.size(); ++i) {
    BlockCache cache = zero_block_cache(c);
    BlockTrace trace;
    h = block_forward(h, f.layers[i], c, cache, ForwardMode::prefill, opt, &trace);
    LayerReport lr;
    lr.metrics = compare_outputs(h, test.output.layer_outputs[i]);
    lr.linears.push_back(linear_error("in_proj", trace.in_proj_x, f.layers[i].in_proj, c, opt.threads));
    lr.linears.push_back(linear_error("out_proj", trace.out_proj_x, f.layers[i].out_proj, c, opt.threads));
    rep.layers.push_back(std::move(lr));
  }
  rep.end_to_end = compare_outputs(model_head(f, h, opt.threads), test.output.out);
  return rep;
}

inline nlohmann::json to_json(const ErrorMetrics& m) {
  return {{"rel_l2", m.rel_l2}, {"cosine", m.cosine}, {"max_abs", m.max_abs}};
}

inline nlohmann::json to_json(const ErrorReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    nlohmann::json j = to_json(r.layers[i].metrics);
    j["layer"] = i;
    nlohmann::json lin = nlohmann::json::object();
    for (const LinearError& e : r.layers[i].linears)
      lin[e.name] = {{"hadamard_rel_l2", e.hadamard_rel_l2}, {"plain_rel_l2", e.plain_rel_l2}};
    j["linears"] = lin;
    layers.push_back(j);
  }
  return {{"schema", "fxmamba.error-report/1"},
          {"positions", r.positions},
          {"quantized", r.quantized},
          {"layers", layers},
          {"end_to_end", to_json(r.end_to_end)},
          {"saturation",
           {{"linear", r.stats.linear_saturated},
            {"conv", r.stats.conv_saturated},
            {"ssm", r.stats.ssm_saturated},
            {"ssm_clamped", r.stats.ssm_clamped}}}};
}

}  // namespace fxm

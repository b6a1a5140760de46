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

// Closed-form cycle model of the accelerator.
//
// Linear (one layer, l rows, d inputs, q outputs, m groups of width g = d/m):
//   per row and round of `linear_groups` groups, the HAT stage needs
//   ceil(g / hat_lanes_per_group) cycles and the MAT stage ceil(q / mat_units_linear);
//   the two stages overlap across rows, so
//   compute = fill_linear + l * ceil(m / linear_groups) * max(hat, mat)
//   memory  = (q*d int8 weights + 2*l*(d + q) activation bytes) / dram_bytes_per_cycle
//   cycles  = max(compute, memory)
// Conv: fill_conv + L * ceil(channels / conv_mat_units) * ceil(d_conv / 4).
// SSM, per token, no cross-token overlap:
//   step1 = ceil(H / nl)                       SoftPlus on the nonlinear unit
//   step2 = ceil(H / nl) + ceil(H*N / lane64)  exp, then Q = dt~ B
//   step3 = H * ceil(P*N / (tile_rows*tile_cols)) + H * ceil(P / tile_rows)
//   with nl = min(ssm_lane24, nl_lanes).
// Norm/SiLU on fp_lanes float lanes, per token:
//   2*ceil(d_model/fp) + 3*ceil(d_inner/fp) + ceil(channels/fp), plus fill_norm.
// Other: residual adds plus SSM state in/out DMA once per call and layer.
// The tied output head counts as a linear over the last position only.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>

#include "json.hpp"
#include "fxmamba/error.hpp"
#include "fxmamba/model_config.hpp"

namespace fxm {

struct HwConfig {
  double freq_mhz = 250.0;
  std::size_t linear_groups = 6;
  std::size_t hat_lanes_per_group = 4;
  std::size_t mat_units_linear = 64;
  std::size_t conv_mat_units = 32;
  std::size_t ssm_lane24 = 24;
  std::size_t ssm_lane64 = 64;
  std::size_t ssm_tile_rows = 32;
  std::size_t ssm_tile_cols = 8;
  std::size_t nl_lanes = 24;
  std::size_t fp_lanes = 32;
  std::uint64_t fill_linear = 8;
  std::uint64_t fill_conv = 4;
  std::uint64_t fill_norm = 4;
  double dram_bytes_per_cycle = 64.0;
  bool overlap = false;  // optimistic composition: modules fully pipelined

  friend bool operator==(const HwConfig&, const HwConfig&) = default;
};

inline void validate(const HwConfig& h) {
  require(h.freq_mhz > 0.0 && h.dram_bytes_per_cycle > 0.0 && h.linear_groups > 0 && h.hat_lanes_per_group > 0 &&
              h.mat_units_linear > 0 && h.conv_mat_units > 0 && h.ssm_lane24 > 0 && h.ssm_lane64 > 0 &&
              h.ssm_tile_rows > 0 && h.ssm_tile_cols > 0 && h.nl_lanes > 0 && h.fp_lanes > 0,
          Errc::invalid_argument, "hardware parameters must be positive");
}

inline nlohmann::json to_json(const HwConfig& h) {
  return {{"freq_mhz", h.freq_mhz},
          {"linear_groups", h.linear_groups},
          {"hat_lanes_per_group", h.hat_lanes_per_group},
          {"mat_units_linear", h.mat_units_linear},
          {"conv_mat_units", h.conv_mat_units},
          {"ssm_lane24", h.ssm_lane24},
          {"ssm_lane64", h.ssm_lane64},
          {"ssm_tile_rows", h.ssm_tile_rows},
          {"ssm_tile_cols", h.ssm_tile_cols},
          {"nl_lanes", h.nl_lanes},
          {"fp_lanes", h.fp_lanes},
          {"fill_linear", h.fill_linear},
          {"fill_conv", h.fill_conv},
          {"fill_norm", h.fill_norm},
          {"dram_bytes_per_cycle", h.dram_bytes_per_cycle},
          {"overlap", h.overlap}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline HwConfig hw_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), Errc::invalid_argument, "hardware config must be a JSON object");
  HwConfig h;
  const nlohmann::json defaults = to_json(h);
  for (const auto& [key, value] : j.items()) {
    require(defaults.contains(key), Errc::invalid_argument, "unknown hardware config key: " + key);
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    using T = std::remove_reference_t<decltype(field)>;
    const auto& v = j.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      require(v.is_boolean(), Errc::invalid_argument, std::string("hardware config key ") + key + " must be boolean");
    } else if constexpr (std::is_integral_v<T>) {
      require(v.is_number_integer() && v.template get<std::int64_t>() >= 0, Errc::invalid_argument,
              std::string("hardware config key ") + key + " must be a non-negative integer");
    } else {
      require(v.is_number(), Errc::invalid_argument, std::string("hardware config key ") + key + " must be a number");
    }
    field = v.template get<T>();
  };
  get("freq_mhz", h.freq_mhz);
  get("linear_groups", h.linear_groups);
  get("hat_lanes_per_group", h.hat_lanes_per_group);
  get("mat_units_linear", h.mat_units_linear);
  get("conv_mat_units", h.conv_mat_units);
  get("ssm_lane24", h.ssm_lane24);
  get("ssm_lane64", h.ssm_lane64);
  get("ssm_tile_rows", h.ssm_tile_rows);
  get("ssm_tile_cols", h.ssm_tile_cols);
  get("nl_lanes", h.nl_lanes);
  get("fp_lanes", h.fp_lanes);
  get("fill_linear", h.fill_linear);
  get("fill_conv", h.fill_conv);
  get("fill_norm", h.fill_norm);
  get("dram_bytes_per_cycle", h.dram_bytes_per_cycle);
  get("overlap", h.overlap);
  validate(h);
  return h;
}

namespace detail {

inline std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

inline std::uint64_t bytes_to_cycles(double bytes, const HwConfig& hw) {
  return static_cast<std::uint64_t>(std::ceil(bytes / hw.dram_bytes_per_cycle));
}

}  // namespace detail

inline void check_linear_dims(std::uint64_t d, std::uint64_t q, std::uint64_t m) {
  require(d > 0 && q > 0 && m > 0 && d % m == 0, Errc::invalid_argument, "linear dims must be positive and d % m == 0");
}

inline std::uint64_t linear_compute_cycles(std::uint64_t l, std::uint64_t d, std::uint64_t q, std::uint64_t m,
                                           const HwConfig& hw) {
  check_linear_dims(d, q, m);
  if (l == 0) return 0;
  using detail::ceil_div;
  const std::uint64_t stage = std::max(ceil_div(d / m, hw.hat_lanes_per_group), ceil_div(q, hw.mat_units_linear));
  return hw.fill_linear + l * ceil_div(m, hw.linear_groups) * stage;
}

inline std::uint64_t linear_memory_cycles(std::uint64_t l, std::uint64_t d, std::uint64_t q, const HwConfig& hw) {
  if (l == 0) return 0;
  return detail::bytes_to_cycles(static_cast<double>(q * d + 2 * l * (d + q)), hw);
}

// Linear with an explicit group count m (d % m == 0).
inline std::uint64_t estimate_linear_cycles(std::uint64_t l, std::uint64_t d, std::uint64_t q, std::uint64_t m,
                                            const HwConfig& hw) {
  validate(hw);
  return std::max(linear_compute_cycles(l, d, q, m, hw), linear_memory_cycles(l, d, q, hw));
}

struct SsmShape {
  std::uint64_t heads, head_dim, d_state;
};

inline std::uint64_t ssm_cycles_per_token(const SsmShape& s, const HwConfig& hw) {
  using detail::ceil_div;
  const std::uint64_t nl = std::min(hw.ssm_lane24, hw.nl_lanes);
  const std::uint64_t step1 = ceil_div(s.heads, nl);
  const std::uint64_t step2 = ceil_div(s.heads, nl) + ceil_div(s.heads * s.d_state, hw.ssm_lane64);
  const std::uint64_t step3 = s.heads * ceil_div(s.head_dim * s.d_state, hw.ssm_tile_rows * hw.ssm_tile_cols) +
                              s.heads * ceil_div(s.head_dim, hw.ssm_tile_rows);
  return step1 + step2 + step3;
}

inline std::uint64_t estimate_ssm_cycles(std::uint64_t L, const SsmShape& s, const HwConfig& hw) {
  validate(hw);
  return L * ssm_cycles_per_token(s, hw);
}

struct CycleReport {
  std::string mode;  // "prefill" or "decode"
  std::uint64_t tokens = 0;
  std::uint64_t linear = 0, conv = 0, ssm = 0, norm_silu = 0, other = 0;
  std::uint64_t total = 0;
  double seconds = 0.0;
  double tokens_per_s = 0.0;
  std::optional<double> tokens_per_s_per_w;
  bool overlap = false;

  std::uint64_t busy() const { return linear + conv + ssm + norm_silu + other; }
  // Fraction of busy cycles; equals the fraction of total without overlap.
  double share(std::uint64_t part) const { return busy() ? static_cast<double>(part) / static_cast<double>(busy()) : 0.0; }
};

inline double tokens_per_watt(double tokens_per_s, double watts) {
  require(watts > 0.0, Errc::invalid_argument, "power must be positive");
  return tokens_per_s / watts;
}

namespace detail {

// Cycles for one pass of L positions through the whole model.
inline CycleReport estimate_pass(std::uint64_t L, bool prefill, const ModelConfig& c, const HwConfig& hw,
                                 std::optional<double> watts) {
  validate(c);
  validate(hw);
  CycleReport r;
  r.mode = prefill ? "prefill" : "decode";
  r.tokens = L;
  r.overlap = hw.overlap;
  const std::uint64_t dm = c.d_model, di = c.d_inner(), ch = c.conv_channels();
  const auto groups = [&](std::uint64_t d) { return d / std::min<std::uint64_t>(c.hadamard_group, d); };
  const SsmShape s{c.n_heads, c.head_dim, c.d_state};
  const std::uint64_t state_bytes = 2 * c.n_heads * c.head_dim * c.d_state;

  for (std::size_t i = 0; i < c.n_layers; ++i) {
    r.linear += estimate_linear_cycles(L, dm, c.in_proj_out(), groups(dm), hw);
    r.linear += estimate_linear_cycles(L, di, dm, groups(di), hw);
    r.conv += hw.fill_conv + L * ceil_div(ch, hw.conv_mat_units) * ceil_div(c.d_conv, 4);
    r.ssm += estimate_ssm_cycles(L, s, hw);
    r.norm_silu += hw.fill_norm + L * (2 * ceil_div(dm, hw.fp_lanes) + 3 * ceil_div(di, hw.fp_lanes) +
                                       ceil_div(ch, hw.fp_lanes));
    r.other += L * ceil_div(dm, hw.fp_lanes) + bytes_to_cycles(2.0 * static_cast<double>(state_bytes), hw);
  }
  if (c.final_norm) r.norm_silu += hw.fill_norm + 2 * ceil_div(dm, hw.fp_lanes);
  if (c.vocab_size > 0) r.linear += estimate_linear_cycles(1, dm, c.vocab_size, groups(dm), hw);

  r.total = hw.overlap ? std::max({r.linear, r.conv, r.ssm, r.norm_silu, r.other}) : r.busy();
  r.seconds = static_cast<double>(r.total) / (hw.freq_mhz * 1e6);
  r.tokens_per_s = r.seconds > 0.0 ? static_cast<double>(L) / r.seconds : 0.0;
  if (watts) r.tokens_per_s_per_w = tokens_per_watt(r.tokens_per_s, *watts);
  return r;
}

}  // namespace detail

inline CycleReport estimate_prefill(std::uint64_t L, const ModelConfig& c, const HwConfig& hw = {},
                                    std::optional<double> watts = std::nullopt) {
  require(L > 0, Errc::invalid_argument, "prefill length must be positive");
  return detail::estimate_pass(L, true, c, hw, watts);
}

// One generated token. The recurrent cache has constant size, so the cost
// does not depend on how many tokens came before; `context` is accepted only
// so callers can state it.
inline CycleReport estimate_decode(const ModelConfig& c, const HwConfig& hw = {},
                                   std::optional<double> watts = std::nullopt, std::uint64_t context = 0) {
  (void)context;
  return detail::estimate_pass(1, false, c, hw, watts);
}

inline nlohmann::json to_json(const CycleReport& r) {
  nlohmann::json j{{"schema", "fxmamba.perf/1"},
                   {"mode", r.mode},
                   {"tokens", r.tokens},
                   {"overlap", r.overlap},
                   {"cycles",
                    {{"linear", r.linear},
                     {"conv", r.conv},
                     {"ssm", r.ssm},
                     {"norm_silu", r.norm_silu},
                     {"other", r.other},
                     {"total", r.total}}},
                   {"shares",
                    {{"linear", r.share(r.linear)},
                     {"conv", r.share(r.conv)},
                     {"ssm", r.share(r.ssm)},
                     {"norm_silu", r.share(r.norm_silu)},
                     {"other", r.share(r.other)}}},
                   {"seconds", r.seconds},
                   {"tokens_per_s", r.tokens_per_s}};
  j["tokens_per_s_per_w"] = r.tokens_per_s_per_w ? nlohmann::json(*r.tokens_per_s_per_w) : nlohmann::json(nullptr);
  return j;
}

// Structural check of a perf JSON document against schema fxmamba.perf/1.
inline std::vector<std::string> check_perf_json(const nlohmann::json& j) {
  std::vector<std::string> errs;
  auto need = [&](const nlohmann::json& obj, const char* key, auto pred, const char* what) {
    if (!obj.is_object() || !obj.contains(key) || !pred(obj.at(key))) errs.push_back(std::string(key) + ": " + what);
  };
  auto is_uint = [](const nlohmann::json& v) { return v.is_number_unsigned(); };
  auto is_num = [](const nlohmann::json& v) { return v.is_number() && v.template get<double>() >= 0.0; };
  auto is_bool = [](const nlohmann::json& v) { return v.is_boolean(); };
  auto is_obj = [](const nlohmann::json& v) { return v.is_object(); };
  if (!j.is_object() || j.value("schema", "") != "fxmamba.perf/1") errs.push_back("schema: expected fxmamba.perf/1");
  need(j, "mode", [](const nlohmann::json& v) { return v == "prefill" || v == "decode"; }, "prefill or decode");
  need(j, "tokens", is_uint, "unsigned integer");
  need(j, "overlap", is_bool, "boolean");
  need(j, "cycles", is_obj, "object");
  need(j, "shares", is_obj, "object");
  need(j, "seconds", is_num, "non-negative number");
  need(j, "tokens_per_s", is_num, "non-negative number");
  need(j, "tokens_per_s_per_w", [&](const nlohmann::json& v) { return v.is_null() || is_num(v); }, "number or null");
  if (j.contains("cycles") && j["cycles"].is_object()) {
    for (const char* k : {"linear", "conv", "ssm", "norm_silu", "other", "total"}) need(j["cycles"], k, is_uint, "unsigned integer");
  }
  if (j.contains("shares") && j["shares"].is_object()) {
    for (const char* k : {"linear", "conv", "ssm", "norm_silu", "other"}) need(j["shares"], k, is_num, "non-negative number");
  }
  return errs;
}

// Reference configuration of the 2.7B model used for calibration checks.
inline ModelConfig mamba2_2p7b_config() {
  ModelConfig c;
  c.n_layers = 64;
  c.d_model = 2560;
  c.expand = 2;
  c.n_heads = 80;
  c.head_dim = 64;
  c.d_state = 128;
  c.n_groups = 1;
  c.d_conv = 4;
  c.vocab_size = 50280;
  return c;
}

}  // namespace fxm

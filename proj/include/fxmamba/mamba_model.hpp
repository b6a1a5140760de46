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

// Mamba2 block and stacked model in two numeric paths:
//   reference: double linears, conv and SSM with exact SoftPlus/exp
//   quantized: rotated W8A8 linears, fixed-point conv and SSM
// RMSNorm and SiLU run in 32-bit float in both.
//
// Block dataflow:
//   u = rms_norm(x); [z | xBC | dt] = in_proj(u)
//   xBC = silu(conv(xBC)); [X | B | C] = xBC
//   y = ssm(X, B, C, dt); g = rms_norm_gated(y, z); out = x + out_proj(g)

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fxmamba/error.hpp"
#include "fxmamba/fixpoint.hpp"
#include "fxmamba/hadamard_linear.hpp"
#include "fxmamba/matrix.hpp"
#include "fxmamba/model_config.hpp"
#include "fxmamba/parallel.hpp"
#include "fxmamba/ssm_block.hpp"

namespace fxm {

// ---------------------------------------------------------------------------
// Float32 elementwise pieces
// ---------------------------------------------------------------------------

inline std::vector<double> rms_norm(std::span<const double> x, std::span<const double> w, double eps) {
  require(x.size() == w.size(), Errc::shape_mismatch, "rms_norm length mismatch");
  std::vector<double> y(x.size(), 0.0);
  if (x.empty()) return y;
  float ss = 0.0f;
  for (double v : x) ss += static_cast<float>(v) * static_cast<float>(v);
  const float ms = ss / static_cast<float>(x.size()) + static_cast<float>(eps);
  if (ms == 0.0f) return y;
  const float inv = 1.0f / std::sqrt(ms);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<float>(x[i]) * inv * static_cast<float>(w[i]);
  return y;
}

inline double silu(double x) {
  const float f = static_cast<float>(x);
  return f / (1.0f + std::exp(-f));
}

inline MatrixD rms_norm_rows(const MatrixD& x, std::span<const double> w, double eps) {
  MatrixD y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto n = rms_norm(x.row(r), w, eps);
    std::copy(n.begin(), n.end(), y.row(r).begin());
  }
  return y;
}

// Gate first, then normalize each of `groups` equal slices of the row.
inline MatrixD gated_rms_norm(const MatrixD& y, const MatrixD& z, std::span<const double> w, double eps,
                              std::size_t groups) {
  require(y.rows() == z.rows() && y.cols() == z.cols() && y.cols() == w.size(), Errc::shape_mismatch,
          "gated norm shape mismatch");
  require(groups > 0 && y.cols() % groups == 0, Errc::shape_mismatch, "gated norm group count");
  const std::size_t gw = y.cols() / groups;
  MatrixD out(y.rows(), y.cols());
  std::vector<double> g(gw);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    for (std::size_t k = 0; k < groups; ++k) {
      for (std::size_t i = 0; i < gw; ++i) {
        const std::size_t c = k * gw + i;
        g[i] = static_cast<float>(y(r, c)) * static_cast<float>(silu(z(r, c)));
      }
      const auto n = rms_norm(g, w.subspan(k * gw, gw), eps);
      std::copy(n.begin(), n.end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(k * gw));
    }
  }
  return out;
}

// x W^T in double, rows in parallel.
inline MatrixD linear_ref(const MatrixD& x, const MatrixD& w, unsigned threads = 1) {
  require(x.cols() == w.cols(), Errc::shape_mismatch, "linear input width does not match weight");
  MatrixD y(x.rows(), w.rows());
  parallel_for(x.rows(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      const auto xr = x.row(r);
      for (std::size_t o = 0; o < w.rows(); ++o) {
        const auto wr = w.row(o);
        double acc = 0.0;
        for (std::size_t k = 0; k < xr.size(); ++k) acc += xr[k] * wr[k];
        y(r, o) = acc;
      }
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Causal depthwise convolution
// ---------------------------------------------------------------------------

// Reference path. `window` holds the previous k-1 inputs, oldest row first,
// and is advanced past x on return.
inline MatrixD causal_conv1d(const MatrixD& x, const MatrixD& kernel, std::span<const double> bias, MatrixD& window) {
  const std::size_t ch = kernel.rows(), k = kernel.cols();
  require(k > 0, Errc::invalid_argument, "empty convolution kernel");
  require(x.cols() == ch && bias.size() == ch, Errc::shape_mismatch, "convolution channel mismatch");
  require(window.rows() == k - 1 && window.cols() == ch, Errc::cache_mismatch,
          "convolution window must be (kernel length - 1) x channels");
  const std::size_t L = x.rows(), W = k - 1;
  auto at = [&](std::size_t pos, std::size_t c) { return pos < W ? window(pos, c) : x(pos - W, c); };
  MatrixD y(L, ch);
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t c = 0; c < ch; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) acc += kernel(c, j) * at(t + j, c);
      y(t, c) = acc + bias[c];
    }
  }
  MatrixD next(W, ch);
  for (std::size_t i = 0; i < W; ++i)
    for (std::size_t c = 0; c < ch; ++c) next(i, c) = at(L + i, c);
  window = std::move(next);
  return y;
}

inline MatrixD causal_conv1d(const MatrixD& x, const MatrixD& kernel, std::span<const double> bias) {
  MatrixD window(kernel.cols() - 1, kernel.rows(), 0.0);
  return causal_conv1d(x, kernel, bias, window);
}

// Fixed-point conv: 16-bit PoT activations, int8 weights with a PoT exponent
// per channel, 64-bit MAT accumulation, one narrowing to the output format.
struct QuantConv {
  std::size_t channels = 0;
  std::size_t k = 0;
  std::vector<std::int32_t> w;  // channels x k int8 codes
  std::vector<int> w_frac;      // per channel
  std::vector<std::int32_t> bias;  // codes in `out`
  FixFormat in{16, 10};
  FixFormat out{16, 10};
};

inline QuantConv quantize_conv(const MatrixD& kernel, std::span<const double> bias, FixFormat in, FixFormat out) {
  require(bias.size() == kernel.rows(), Errc::shape_mismatch, "convolution bias length");
  QuantConv q{kernel.rows(), kernel.cols(), {}, {}, {}, in, out};
  for (std::size_t c = 0; c < q.channels; ++c) {
    const auto row = kernel.row(c);
    const FixFormat wf{8, -choose_pot_exponent(row, 8)};
    const FixTensor codes = quantize_pot(row, wf);
    q.w.insert(q.w.end(), codes.codes.begin(), codes.codes.end());
    q.w_frac.push_back(wf.frac);
  }
  q.bias = quantize_pot(bias, out).codes;
  return q;
}

// `window` holds the previous k-1 input code rows in q.in.
inline Matrix<std::int32_t> causal_conv1d_quant(const Matrix<std::int32_t>& x, const QuantConv& q,
                                                Matrix<std::int32_t>& window, std::size_t& saturated) {
  const std::size_t ch = q.channels, k = q.k, W = k - 1, L = x.rows();
  require(x.cols() == ch, Errc::shape_mismatch, "convolution channel mismatch");
  require(window.rows() == W && window.cols() == ch, Errc::cache_mismatch,
          "convolution window must be (kernel length - 1) x channels");
  auto at = [&](std::size_t pos, std::size_t c) { return pos < W ? window(pos, c) : x(pos - W, c); };
  Matrix<std::int32_t> y(L, ch);
  for (std::size_t c = 0; c < ch; ++c) {
    const int acc_frac = q.in.frac + q.w_frac[c];
    const int common = std::max(acc_frac, q.out.frac);
    const std::int64_t bias = detail::align(q.bias[c], q.out.frac, common);
    for (std::size_t t = 0; t < L; ++t) {
      std::int64_t acc = 0;
      for (std::size_t j = 0; j < k; ++j) acc += static_cast<std::int64_t>(q.w[c * k + j]) * at(t + j, c);
      y(t, c) = narrow(detail::align(acc, acc_frac, common) + bias, common, q.out, saturated);
    }
  }
  Matrix<std::int32_t> next(W, ch);
  for (std::size_t i = 0; i < W; ++i)
    for (std::size_t c = 0; c < ch; ++c) next(i, c) = at(L + i, c);
  window = std::move(next);
  return y;
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

struct BlockWeights {
  std::vector<double> norm;       // d_model
  MatrixD in_proj;                // in_proj_out x d_model, rows [z | xBC | dt]
  MatrixD conv_w;                 // conv_channels x d_conv
  std::vector<double> conv_b;     // conv_channels
  SsmParams ssm;
  std::vector<double> gate_norm;  // d_inner
  MatrixD out_proj;               // d_model x d_inner
};

struct QuantBlock {
  std::vector<double> norm;
  QuantLinearLayer in_proj;
  QuantConv conv;
  QuantSsm ssm;
  std::vector<double> gate_norm;
  QuantLinearLayer out_proj;
};

struct BlockCache {
  MatrixD conv;                  // reference window
  Matrix<std::int32_t> conv_q;   // quantized window, codes in the conv input format
  SsmState ssm;
  QuantSsmState ssm_q;
};

inline SsmDims ssm_dims(const ModelConfig& c) { return {c.n_heads, c.head_dim, c.d_state, c.n_groups}; }

inline BlockCache zero_block_cache(const ModelConfig& c) {
  return {MatrixD(c.d_conv - 1, c.conv_channels(), 0.0), Matrix<std::int32_t>(c.d_conv - 1, c.conv_channels(), 0),
          zero_state(ssm_dims(c)), zero_quant_state(ssm_dims(c))};
}

inline void check_cache(const BlockCache& cache, const ModelConfig& c) {
  const bool ok = cache.conv.rows() == c.d_conv - 1 && cache.conv.cols() == c.conv_channels() &&
                  cache.conv_q.rows() == c.d_conv - 1 && cache.conv_q.cols() == c.conv_channels() &&
                  cache.ssm.h.size() == ssm_dims(c).state_size() && cache.ssm_q.h.size() == ssm_dims(c).state_size();
  require(ok, Errc::cache_mismatch, "block cache does not match the model config");
}

enum class ForwardMode { prefill, decode };

// Saturation and clamp totals over one forward call.
struct RunStats {
  std::size_t linear_saturated = 0;
  std::size_t conv_saturated = 0;
  std::size_t ssm_saturated = 0;
  std::size_t ssm_clamped = 0;

  std::size_t total() const { return linear_saturated + conv_saturated + ssm_saturated + ssm_clamped; }
  RunStats& operator+=(const RunStats& o) {
    linear_saturated += o.linear_saturated;
    conv_saturated += o.conv_saturated;
    ssm_saturated += o.ssm_saturated;
    ssm_clamped += o.ssm_clamped;
    return *this;
  }
};

struct RunOptions {
  unsigned threads = 1;
};

// Column ranges of the in_proj output and of the conv output.
struct ProjSplit {
  MatrixD z, xbc, dt;
};

inline ProjSplit split_in_proj(const MatrixD& zxbcdt, const ModelConfig& c) {
  const std::size_t di = c.d_inner(), cc = c.conv_channels();
  return {slice_cols(zxbcdt, 0, di), slice_cols(zxbcdt, di, cc), slice_cols(zxbcdt, di + cc, c.n_heads)};
}

inline SsmSequence split_xbc(const MatrixD& xbc, const MatrixD& dt, const ModelConfig& c) {
  const std::size_t di = c.d_inner(), bc = c.bc_width();
  return {slice_cols(xbc, 0, di), slice_cols(xbc, di, bc), slice_cols(xbc, di + bc, bc), dt};
}

inline void apply_silu(MatrixD& m) {
  for (double& v : m.data()) v = silu(v);
}

inline void check_block_input(const MatrixD& x, const ModelConfig& c, ForwardMode mode) {
  require(x.cols() == c.d_model, Errc::shape_mismatch, "block input width must equal d_model");
  require(x.rows() > 0, Errc::invalid_argument, "block input must have at least one row");
  require(mode == ForwardMode::prefill || x.rows() == 1, Errc::invalid_argument, "decode mode takes exactly one row");
}

inline MatrixD add_residual(const MatrixD& x, const MatrixD& out) {
  MatrixD y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] += out.data()[i];
  return y;
}

// Inputs seen by the two linears of a float block.
struct BlockTrace {
  MatrixD in_proj_x;
  MatrixD out_proj_x;
};

inline MatrixD block_forward(const MatrixD& x, const BlockWeights& b, const ModelConfig& c, BlockCache& cache,
                             ForwardMode mode = ForwardMode::prefill, const RunOptions& opt = {},
                             BlockTrace* trace = nullptr) {
  check_block_input(x, c, mode);
  check_cache(cache, c);
  const MatrixD u = rms_norm_rows(x, b.norm, c.rms_eps);
  if (trace) trace->in_proj_x = u;
  ProjSplit p = split_in_proj(linear_ref(u, b.in_proj, opt.threads), c);
  MatrixD xbc = causal_conv1d(p.xbc, b.conv_w, b.conv_b, cache.conv);
  apply_silu(xbc);
  const SsmRun run = ssm_prefill(split_xbc(xbc, p.dt, c), b.ssm, ssm_dims(c), Nonlinearity::exact, cache.ssm);
  cache.ssm = run.state;
  const MatrixD g = gated_rms_norm(run.y, p.z, b.gate_norm, c.rms_eps, c.n_groups);
  if (trace) trace->out_proj_x = g;
  return add_residual(x, linear_ref(g, b.out_proj, opt.threads));
}

inline Matrix<std::int32_t> quantize_rows(const MatrixD& x, FixFormat f, std::size_t& saturated) {
  const FixTensor t = quantize_pot(x, f);
  saturated += t.saturated;
  return Matrix<std::int32_t>(x.rows(), x.cols(), t.codes);
}

inline MatrixD dequantize_rows(const Matrix<std::int32_t>& codes, FixFormat f) {
  MatrixD y(codes.rows(), codes.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = std::ldexp(static_cast<double>(codes.data()[i]), -f.frac);
  return y;
}

inline MatrixD block_forward(const MatrixD& x, const QuantBlock& b, const ModelConfig& c, BlockCache& cache,
                             ForwardMode mode = ForwardMode::prefill, const RunOptions& opt = {},
                             RunStats* stats = nullptr) {
  check_block_input(x, c, mode);
  check_cache(cache, c);
  RunStats s;
  const MatrixD u = rms_norm_rows(x, b.norm, c.rms_eps);
  const QuantLinearOutput in = quantized_linear_ex(u, b.in_proj, ActScaling::calibrated, opt.threads);
  s.linear_saturated += in.saturated;
  ProjSplit p = split_in_proj(in.y, c);

  const Matrix<std::int32_t> xq = quantize_rows(p.xbc, b.conv.in, s.conv_saturated);
  MatrixD xbc = dequantize_rows(causal_conv1d_quant(xq, b.conv, cache.conv_q, s.conv_saturated), b.conv.out);
  apply_silu(xbc);

  QuantSsmRun run = ssm_prefill_quant(split_xbc(xbc, p.dt, c), b.ssm, cache.ssm_q);
  cache.ssm_q = std::move(run.state);
  s.ssm_saturated += run.counters.saturated;
  s.ssm_clamped += run.counters.clamped;

  const MatrixD g = gated_rms_norm(run.y, p.z, b.gate_norm, c.rms_eps, c.n_groups);
  const QuantLinearOutput out = quantized_linear_ex(g, b.out_proj, ActScaling::calibrated, opt.threads);
  s.linear_saturated += out.saturated;
  if (stats) *stats += s;
  return add_residual(x, out.y);
}

// ---------------------------------------------------------------------------
// Stacked model
// ---------------------------------------------------------------------------

template <typename Block>
struct Model {
  ModelConfig cfg;
  MatrixD embedding;            // vocab_size x d_model; also the tied output head
  std::vector<Block> layers;
  std::vector<double> norm_f;   // d_model, used when cfg.final_norm
};

using FloatModel = Model<BlockWeights>;
using QuantModel = Model<QuantBlock>;
using ModelCaches = std::vector<BlockCache>;

// Either token ids (vocab_size > 0) or hidden rows (vocab_size == 0).
struct ModelInput {
  std::vector<std::int64_t> tokens;
  MatrixD hidden;

  static ModelInput from_tokens(std::vector<std::int64_t> t) { return {std::move(t), {}}; }
  static ModelInput from_hidden(MatrixD h) { return {{}, std::move(h)}; }
  std::size_t length(const ModelConfig& c) const { return c.vocab_size > 0 ? tokens.size() : hidden.rows(); }
};

struct ModelOutput {
  MatrixD out;  // logits (vocab_size > 0) or hidden states
  RunStats stats;
  std::vector<MatrixD> layer_outputs;  // residual stream after each layer, when requested
};

inline ModelCaches zero_caches(const ModelConfig& c) { return ModelCaches(c.n_layers, zero_block_cache(c)); }

template <typename Block>
MatrixD embed(const Model<Block>& m, const ModelInput& in) {
  const ModelConfig& c = m.cfg;
  if (c.vocab_size == 0) {
    require(in.hidden.cols() == c.d_model, Errc::shape_mismatch, "hidden input width must equal d_model");
    return in.hidden;
  }
  MatrixD h(in.tokens.size(), c.d_model);
  for (std::size_t t = 0; t < in.tokens.size(); ++t) {
    const std::int64_t id = in.tokens[t];
    require(id >= 0 && static_cast<std::size_t>(id) < c.vocab_size, Errc::invalid_argument,
            "token id " + std::to_string(id) + " out of range for vocab_size " + std::to_string(c.vocab_size));
    const auto e = m.embedding.row(static_cast<std::size_t>(id));
    std::copy(e.begin(), e.end(), h.row(t).begin());
  }
  return h;
}

template <typename Block>
MatrixD model_head(const Model<Block>& m, const MatrixD& h, unsigned threads) {
  const MatrixD n = m.cfg.final_norm ? rms_norm_rows(h, m.norm_f, m.cfg.rms_eps) : h;
  return m.cfg.vocab_size > 0 ? linear_ref(n, m.embedding, threads) : n;
}

template <typename Block>
ModelOutput model_forward(const Model<Block>& m, const ModelInput& in, ModelCaches& caches, ForwardMode mode,
                          const RunOptions& opt = {}, bool keep_layers = false) {
  require(caches.size() == m.cfg.n_layers, Errc::cache_mismatch,
          "expected " + std::to_string(m.cfg.n_layers) + " layer caches, got " + std::to_string(caches.size()));
  require(in.length(m.cfg) > 0, Errc::invalid_argument, "model input must have at least one position");
  ModelOutput res;
  MatrixD h = embed(m, in);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if constexpr (std::is_same_v<Block, QuantBlock>) {
      h = block_forward(h, m.layers[i], m.cfg, caches[i], mode, opt, &res.stats);
    } else {
      h = block_forward(h, m.layers[i], m.cfg, caches[i], mode, opt);
    }
    if (keep_layers) res.layer_outputs.push_back(h);
  }
  res.out = model_head(m, h, opt.threads);
  return res;
}

struct PrefillResult {
  ModelOutput output;
  ModelCaches caches;
};

template <typename Block>
PrefillResult model_prefill(const Model<Block>& m, const ModelInput& in, const RunOptions& opt = {},
                            bool keep_layers = false) {
  PrefillResult r{{}, zero_caches(m.cfg)};
  r.output = model_forward(m, in, r.caches, ForwardMode::prefill, opt, keep_layers);
  return r;
}

template <typename Block>
ModelOutput model_decode_step(const Model<Block>& m, const ModelInput& in, ModelCaches& caches,
                              const RunOptions& opt = {}) {
  require(in.length(m.cfg) == 1, Errc::invalid_argument, "decode step takes exactly one position");
  return model_forward(m, in, caches, ForwardMode::decode, opt);
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

// Groups for a linear with input width d: target width hadamard_group,
// capped at d. Non-power-of-two widths are rejected by the group rule.
inline std::size_t linear_groups(std::size_t d, const ModelConfig& c) {
  const std::size_t width = std::min(c.hadamard_group, d);
  require(d % width == 0, Errc::group_rule,
          "feature dimension " + std::to_string(d) + " is not a multiple of group width " + std::to_string(width));
  group_width(d, d / width);
  return d / width;
}

// Calibrates stage by stage on the quantized pipeline itself, so every
// activation scale is measured on exactly what the quantized model will see
// for the calibration input.
inline QuantBlock quantize_block(const BlockWeights& b, const ModelConfig& c, const MatrixD& x,
                                 const RunOptions& opt = {}) {
  QuantBlock q;
  q.norm = b.norm;
  q.gate_norm = b.gate_norm;
  const MatrixD u = rms_norm_rows(x, b.norm, c.rms_eps);
  q.in_proj = make_quant_linear(b.in_proj, linear_groups(c.d_model, c));
  calibrate_activation(q.in_proj, u);
  ProjSplit p = split_in_proj(quantized_linear_ex(u, q.in_proj, ActScaling::calibrated, opt.threads).y, c);

  // Conv formats: input from the sample, output from the exact result of the
  // quantized operands.
  const FixFormat conv_in = activation_format(p.xbc.data());
  std::size_t ignored = 0;
  const MatrixD xin = dequantize_rows(quantize_rows(p.xbc, conv_in, ignored), conv_in);
  QuantConv probe = quantize_conv(b.conv_w, b.conv_b, conv_in, conv_in);
  MatrixD wdq(probe.channels, probe.k);
  for (std::size_t ch = 0; ch < probe.channels; ++ch)
    for (std::size_t j = 0; j < probe.k; ++j)
      wdq(ch, j) = std::ldexp(static_cast<double>(probe.w[ch * probe.k + j]), -probe.w_frac[ch]);
  const FixFormat conv_out = activation_format(causal_conv1d(xin, wdq, b.conv_b).data());
  q.conv = quantize_conv(b.conv_w, b.conv_b, conv_in, conv_out);

  BlockCache cache = zero_block_cache(c);
  MatrixD xbc = dequantize_rows(causal_conv1d_quant(quantize_rows(p.xbc, conv_in, ignored), q.conv, cache.conv_q,
                                                    ignored),
                                conv_out);
  apply_silu(xbc);
  const SsmSequence seq = split_xbc(xbc, p.dt, c);
  q.ssm = quantize_ssm(b.ssm, ssm_dims(c), ssm_quant_calibrate(seq, b.ssm, ssm_dims(c)));
  const QuantSsmRun run = ssm_prefill_quant(seq, q.ssm);
  const MatrixD g = gated_rms_norm(run.y, p.z, b.gate_norm, c.rms_eps, c.n_groups);
  q.out_proj = make_quant_linear(b.out_proj, linear_groups(c.d_inner(), c));
  calibrate_activation(q.out_proj, g);
  return q;
}

inline QuantModel quantize_model(const FloatModel& f, const ModelInput& calib, const RunOptions& opt = {}) {
  QuantModel q{f.cfg, f.embedding, {}, f.norm_f};
  MatrixD h = embed(f, calib);
  require(h.rows() > 0, Errc::invalid_argument, "empty calibration sample");
  for (const BlockWeights& b : f.layers) {
    q.layers.push_back(quantize_block(b, f.cfg, h, opt));
    BlockCache cache = zero_block_cache(f.cfg);
    h = block_forward(h, q.layers.back(), f.cfg, cache, ForwardMode::prefill, opt);
  }
  return q;
}

}  // namespace fxm

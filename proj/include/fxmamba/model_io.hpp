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

// Model <-> FMW tensor naming schema.
//
// Float checkpoint (all f32):
//   embedding                      [vocab_size, d_model]   when vocab_size > 0
//   norm_f.weight                  [d_model]               when final_norm
//   layers.<i>.norm.weight         [d_model]
//   layers.<i>.in_proj.weight      [2*d_inner + 2*n_groups*d_state + n_heads, d_model]
//   layers.<i>.conv.weight         [conv_channels, d_conv]
//   layers.<i>.conv.bias           [conv_channels]
//   layers.<i>.ssm.A               [n_heads]   negative
//   layers.<i>.ssm.D               [n_heads]
//   layers.<i>.ssm.dt_bias         [n_heads]
//   layers.<i>.gate_norm.weight    [d_inner]
//   layers.<i>.out_proj.weight     [d_model, d_inner]
//
// Quantized checkpoint: the same norms and embedding, plus
//   quantized                      i16 scalar marker
//   <linear>.wq                    i8  [q, d], Hadamard-rotated per group
//   <linear>.s_w                   f32 [2] = (max|W H|, 127); s_w = ratio
//   <linear>.s_coe, .s_shift, .m   i16 scalars; static activation requant pair
//   layers.<i>.conv.weight         i8  [conv_channels, d_conv]
//   layers.<i>.conv.weight_frac    i16 [conv_channels]
//   layers.<i>.conv.bias           i16 [conv_channels], frac = output format
//   layers.<i>.conv.in_frac        i16 scalar
//   layers.<i>.ssm.A / .D / .dt_bias  i16 [n_heads] with their formats
//   layers.<i>.ssm.formats         i16 [8] fracs of x, B, C, dt_sum, arg, Q, H, Y
//
// Model input: `tokens` f32 [L] holding integer ids (vocab_size > 0), or
// `hidden` f32 [L, d_model]. Ids must stay below 2^24 to be exact in f32.

#include <sstream>
#include <string>
#include <vector>

#include "fxmamba/fmw.hpp"
#include "fxmamba/mamba_model.hpp"

namespace fxm {

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> dims;
};

inline std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i) + "."; }

inline std::string dims_str(const std::vector<std::size_t>& d) {
  std::ostringstream s;
  s << '[';
  for (std::size_t i = 0; i < d.size(); ++i) s << (i ? ", " : "") << d[i];
  s << ']';
  return s.str();
}

inline std::vector<TensorSpec> float_schema(const ModelConfig& c) {
  std::vector<TensorSpec> s;
  if (c.vocab_size > 0) s.push_back({"embedding", {c.vocab_size, c.d_model}});
  if (c.final_norm) s.push_back({"norm_f.weight", {c.d_model}});
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string p = layer_prefix(i);
    s.push_back({p + "norm.weight", {c.d_model}});
    s.push_back({p + "in_proj.weight", {c.in_proj_out(), c.d_model}});
    s.push_back({p + "conv.weight", {c.conv_channels(), c.d_conv}});
    s.push_back({p + "conv.bias", {c.conv_channels()}});
    s.push_back({p + "ssm.A", {c.n_heads}});
    s.push_back({p + "ssm.D", {c.n_heads}});
    s.push_back({p + "ssm.dt_bias", {c.n_heads}});
    s.push_back({p + "gate_norm.weight", {c.d_inner()}});
    s.push_back({p + "out_proj.weight", {c.d_model, c.d_inner()}});
  }
  return s;
}

inline bool is_quantized(const FmwFile& f) {
  if (f.contains("quantized")) return true;
  for (const FmwTensor& t : f.tensors()) {
    if (t.name.size() >= 3 && t.name.ends_with(".wq")) return true;
  }
  return false;
}

// Every schema problem in the file, one message per tensor.
inline std::vector<std::string> check_float_schema(const FmwFile& f, const ModelConfig& c) {
  std::vector<std::string> problems;
  for (const TensorSpec& spec : float_schema(c)) {
    if (!f.contains(spec.name)) {
      problems.push_back("missing tensor: " + spec.name);
      continue;
    }
    const FmwTensor& t = f.get(spec.name);
    const std::vector<std::size_t> got(t.dims.begin(), t.dims.end());
    if (got != spec.dims) {
      problems.push_back("tensor " + spec.name + " has shape " + dims_str(got) + ", expected " + dims_str(spec.dims));
    } else if (t.dtype != DType::f32 && t.dtype != DType::f16) {
      problems.push_back("tensor " + spec.name + " must be floating point, got " + dtype_name(t.dtype));
    }
  }
  return problems;
}

namespace detail {

inline std::vector<double> vec(const FmwFile& f, const std::string& name, std::size_t n) {
  const FmwTensor& t = f.get(name);
  require(t.numel() == n, Errc::shape_mismatch,
          "tensor " + name + " has " + std::to_string(t.numel()) + " elements, expected " + std::to_string(n));
  return t.values();
}

inline MatrixD mat(const FmwFile& f, const std::string& name, std::size_t rows, std::size_t cols) {
  const FmwTensor& t = f.get(name);
  require(t.dims.size() == 2 && t.dims[0] == rows && t.dims[1] == cols, Errc::shape_mismatch,
          "tensor " + name + " has shape " + dims_str({t.dims.begin(), t.dims.end()}) + ", expected " +
              dims_str({rows, cols}));
  return MatrixD(rows, cols, t.values());
}

inline std::int32_t scalar(const FmwFile& f, const std::string& name) {
  const auto c = f.get(name).codes();
  require(c.size() == 1, Errc::shape_mismatch, "tensor " + name + " must be a scalar");
  return c[0];
}

inline FmwTensor f32_vec(std::string name, const std::vector<double>& v) { return make_f32(std::move(name), {v.size()}, v); }
inline FmwTensor f32_mat(std::string name, const MatrixD& m) { return make_f32(std::move(name), {m.rows(), m.cols()}, m.data()); }

inline void put_head(FmwFile& f, const ModelConfig& c, const MatrixD& embedding, const std::vector<double>& norm_f) {
  if (c.vocab_size > 0) f.add(f32_mat("embedding", embedding));
  if (c.final_norm) f.add(f32_vec("norm_f.weight", norm_f));
}

template <typename Block>
void get_head(const FmwFile& f, Model<Block>& m) {
  const ModelConfig& c = m.cfg;
  if (c.vocab_size > 0) m.embedding = mat(f, "embedding", c.vocab_size, c.d_model);
  if (c.final_norm) m.norm_f = vec(f, "norm_f.weight", c.d_model);
}

inline void put_linear(FmwFile& f, const std::string& p, const QuantLinearLayer& l) {
  std::vector<std::int32_t> codes(l.wq.data().begin(), l.wq.data().end());
  f.add(make_int(p + ".wq", DType::i8, 0, {l.q, l.d}, codes));
  f.add(make_f32(p + ".s_w", {2}, std::vector<double>{l.w_peak, 127.0}));
  require(l.act.coe <= INT16_MAX && l.act.shift >= INT16_MIN && l.act.shift <= INT16_MAX && l.m <= INT16_MAX,
          Errc::invalid_argument, "linear " + p + " parameters do not fit the i16 fields");
  f.add(make_scalar_i16(p + ".s_coe", static_cast<std::int32_t>(l.act.coe)));
  f.add(make_scalar_i16(p + ".s_shift", l.act.shift));
  f.add(make_scalar_i16(p + ".m", static_cast<std::int32_t>(l.m)));
}

inline QuantLinearLayer get_linear(const FmwFile& f, const std::string& p, std::size_t q, std::size_t d) {
  QuantLinearLayer l;
  l.q = q;
  l.d = d;
  l.m = static_cast<std::size_t>(scalar(f, p + ".m"));
  group_width(d, l.m);
  const FmwTensor& wq = f.get(p + ".wq");
  require(wq.dtype == DType::i8 && wq.dims.size() == 2 && wq.dims[0] == q && wq.dims[1] == d, Errc::shape_mismatch,
          "tensor " + p + ".wq must be i8 " + dims_str({q, d}));
  const auto codes = wq.codes();
  l.wq = Matrix<std::int8_t>(q, d, std::vector<std::int8_t>(codes.begin(), codes.end()));
  const auto sw = vec(f, p + ".s_w", 2);
  require(sw[1] == 127.0 && sw[0] >= 0.0, Errc::invalid_argument, "tensor " + p + ".s_w must hold (peak, 127)");
  l.w_peak = static_cast<float>(sw[0]);
  l.s_w = weight_scale(l.w_peak);
  l.act.coe = scalar(f, p + ".s_coe");
  l.act.shift = scalar(f, p + ".s_shift");
  l.act.bits = 15;
  require(l.act.coe > 0, Errc::invalid_argument, "tensor " + p + ".s_coe must be positive");
  l.calibrated = true;
  return l;
}

}  // namespace detail

inline FmwFile float_model_to_fmw(const FloatModel& m) {
  const ModelConfig& c = m.cfg;
  FmwFile f;
  detail::put_head(f, c, m.embedding, m.norm_f);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const std::string p = layer_prefix(i);
    const BlockWeights& b = m.layers[i];
    f.add(detail::f32_vec(p + "norm.weight", b.norm));
    f.add(detail::f32_mat(p + "in_proj.weight", b.in_proj));
    f.add(detail::f32_mat(p + "conv.weight", b.conv_w));
    f.add(detail::f32_vec(p + "conv.bias", b.conv_b));
    f.add(detail::f32_vec(p + "ssm.A", b.ssm.A));
    f.add(detail::f32_vec(p + "ssm.D", b.ssm.D));
    f.add(detail::f32_vec(p + "ssm.dt_bias", b.ssm.dt_bias));
    f.add(detail::f32_vec(p + "gate_norm.weight", b.gate_norm));
    f.add(detail::f32_mat(p + "out_proj.weight", b.out_proj));
  }
  return f;
}

inline FloatModel float_model_from_fmw(const FmwFile& f, const ModelConfig& c) {
  validate(c);
  require(!is_quantized(f), Errc::already_quantized, "already quantized: expected a float checkpoint");
  const auto problems = check_float_schema(f, c);
  if (!problems.empty()) {
    fail(problems[0].starts_with("missing") ? Errc::missing_tensor : Errc::shape_mismatch, problems[0]);
  }
  FloatModel m;
  m.cfg = c;
  detail::get_head(f, m);
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string p = layer_prefix(i);
    BlockWeights b;
    b.norm = detail::vec(f, p + "norm.weight", c.d_model);
    b.in_proj = detail::mat(f, p + "in_proj.weight", c.in_proj_out(), c.d_model);
    b.conv_w = detail::mat(f, p + "conv.weight", c.conv_channels(), c.d_conv);
    b.conv_b = detail::vec(f, p + "conv.bias", c.conv_channels());
    b.ssm.A = detail::vec(f, p + "ssm.A", c.n_heads);
    b.ssm.D = detail::vec(f, p + "ssm.D", c.n_heads);
    b.ssm.dt_bias = detail::vec(f, p + "ssm.dt_bias", c.n_heads);
    validate(b.ssm, ssm_dims(c));
    b.gate_norm = detail::vec(f, p + "gate_norm.weight", c.d_inner());
    b.out_proj = detail::mat(f, p + "out_proj.weight", c.d_model, c.d_inner());
    m.layers.push_back(std::move(b));
  }
  return m;
}

inline FmwFile quant_model_to_fmw(const QuantModel& m) {
  const ModelConfig& c = m.cfg;
  FmwFile f;
  f.add(make_scalar_i16("quantized", 1));
  detail::put_head(f, c, m.embedding, m.norm_f);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const std::string p = layer_prefix(i);
    const QuantBlock& b = m.layers[i];
    f.add(detail::f32_vec(p + "norm.weight", b.norm));
    detail::put_linear(f, p + "in_proj", b.in_proj);
    f.add(make_int(p + "conv.weight", DType::i8, 0, {b.conv.channels, b.conv.k}, b.conv.w));
    f.add(make_int(p + "conv.weight_frac", DType::i16, 0, {b.conv.channels}, b.conv.w_frac));
    f.add(make_int(p + "conv.bias", DType::i16, b.conv.out.frac, {b.conv.channels}, b.conv.bias));
    f.add(make_scalar_i16(p + "conv.in_frac", b.conv.in.frac));
    const SsmFormats& sf = b.ssm.fmt;
    f.add(make_int(p + "ssm.A", DType::i16, sf.A.frac, {c.n_heads}, b.ssm.A));
    f.add(make_int(p + "ssm.D", DType::i16, sf.D.frac, {c.n_heads}, b.ssm.D));
    f.add(make_int(p + "ssm.dt_bias", DType::i16, sf.dt.frac, {c.n_heads}, b.ssm.dt_bias));
    const std::vector<std::int32_t> fracs{sf.x.frac,   sf.B.frac, sf.C.frac, sf.dt_sum.frac,
                                          sf.arg.frac, sf.Q.frac, sf.H.frac, sf.Y.frac};
    f.add(make_int(p + "ssm.formats", DType::i16, 0, {fracs.size()}, fracs));
    f.add(detail::f32_vec(p + "gate_norm.weight", b.gate_norm));
    detail::put_linear(f, p + "out_proj", b.out_proj);
  }
  return f;
}

inline QuantModel quant_model_from_fmw(const FmwFile& f, const ModelConfig& c) {
  validate(c);
  require(is_quantized(f), Errc::invalid_argument, "expected a quantized checkpoint; run quantize first");
  QuantModel m;
  m.cfg = c;
  detail::get_head(f, m);
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string p = layer_prefix(i);
    QuantBlock b;
    b.norm = detail::vec(f, p + "norm.weight", c.d_model);
    b.in_proj = detail::get_linear(f, p + "in_proj", c.in_proj_out(), c.d_model);

    const FmwTensor& cw = f.get(p + "conv.weight");
    require(cw.dtype == DType::i8 && cw.dims.size() == 2 && cw.dims[0] == c.conv_channels() && cw.dims[1] == c.d_conv,
            Errc::shape_mismatch, "tensor " + p + "conv.weight must be i8 " + dims_str({c.conv_channels(), c.d_conv}));
    b.conv.channels = c.conv_channels();
    b.conv.k = c.d_conv;
    b.conv.w = cw.codes();
    const auto wf = f.get(p + "conv.weight_frac").codes();
    require(wf.size() == c.conv_channels(), Errc::shape_mismatch, "tensor " + p + "conv.weight_frac length");
    b.conv.w_frac.assign(wf.begin(), wf.end());
    const FmwTensor& cb = f.get(p + "conv.bias");
    require(cb.is_integer() && cb.numel() == c.conv_channels(), Errc::shape_mismatch,
            "tensor " + p + "conv.bias must be i16 [" + std::to_string(c.conv_channels()) + "]");
    b.conv.bias = cb.codes();
    b.conv.out = {16, cb.frac};
    b.conv.in = {16, detail::scalar(f, p + "conv.in_frac")};

    const FmwTensor& a = f.get(p + "ssm.A");
    const FmwTensor& d = f.get(p + "ssm.D");
    const FmwTensor& dtb = f.get(p + "ssm.dt_bias");
    for (const FmwTensor* t : {&a, &d, &dtb}) {
      require(t->dtype == DType::i16 && t->numel() == c.n_heads, Errc::shape_mismatch,
              "tensor " + t->name + " must be i16 [" + std::to_string(c.n_heads) + "]");
    }
    const auto fr = f.get(p + "ssm.formats").codes();
    require(fr.size() == 8, Errc::shape_mismatch, "tensor " + p + "ssm.formats must hold 8 fracs");
    SsmFormats sf;
    sf.x = {16, fr[0]};
    sf.B = {16, fr[1]};
    sf.C = {16, fr[2]};
    sf.dt_sum = {16, fr[3]};
    sf.arg = {16, fr[4]};
    sf.Q = {16, fr[5]};
    sf.H = {16, fr[6]};
    sf.Y = {16, fr[7]};
    sf.A = {16, a.frac};
    sf.D = {16, d.frac};
    sf.dt = {16, dtb.frac};
    b.ssm = QuantSsm{ssm_dims(c), sf, a.codes(), d.codes(), dtb.codes()};
    for (std::int32_t v : b.ssm.A) require(v < 0, Errc::invalid_argument, "tensor " + p + "ssm.A must be negative");

    b.gate_norm = detail::vec(f, p + "gate_norm.weight", c.d_inner());
    b.out_proj = detail::get_linear(f, p + "out_proj", c.d_model, c.d_inner());
    m.layers.push_back(std::move(b));
  }
  return m;
}

// Float checkpoint in, quantized checkpoint out. Deterministic in
// (checkpoint, config, calibration input).
inline FmwFile quantize_checkpoint(const FmwFile& in, const ModelConfig& c, const ModelInput& calib,
                                   const RunOptions& opt = {}) {
  require(!is_quantized(in), Errc::already_quantized, "already quantized");
  return quant_model_to_fmw(quantize_model(float_model_from_fmw(in, c), calib, opt));
}

// ---------------------------------------------------------------------------
// Decode caches
// ---------------------------------------------------------------------------
// Quantized caches store codes. Reference caches store each double as three
// f32 components whose sum restores it exactly.

namespace detail {

inline FmwTensor f32_split(std::string name, const std::vector<double>& v) {
  std::vector<double> parts(3 * v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float hi = static_cast<float>(v[i]);
    const float mid = static_cast<float>(v[i] - hi);
    const float lo = static_cast<float>(v[i] - hi - mid);
    require(static_cast<double>(hi) + mid + lo == v[i], Errc::invalid_argument,
            "cache value in " + name + " cannot be stored exactly");
    parts[i] = hi;
    parts[v.size() + i] = mid;
    parts[2 * v.size() + i] = lo;
  }
  return make_f32(std::move(name), {3, v.size()}, parts);
}

inline std::vector<double> f32_join(const FmwFile& f, const std::string& name, std::size_t n) {
  const auto p = vec(f, name, 3 * n);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = p[i] + p[n + i] + p[2 * n + i];
  return v;
}

}  // namespace detail

inline FmwFile caches_to_fmw(const ModelCaches& caches, const ModelConfig& c, bool quantized,
                             const QuantModel* qm = nullptr) {
  FmwFile f;
  for (std::size_t i = 0; i < caches.size(); ++i) {
    check_cache(caches[i], c);
    const std::string p = "cache." + std::to_string(i) + ".";
    if (quantized) {
      require(qm != nullptr, Errc::invalid_argument, "quantized caches need the model formats");
      const QuantBlock& b = qm->layers[i];
      f.add(make_int(p + "conv", DType::i16, b.conv.in.frac, {c.d_conv - 1, c.conv_channels()},
                     caches[i].conv_q.data()));
      f.add(make_int(p + "ssm", DType::i16, b.ssm.fmt.H.frac, {caches[i].ssm_q.h.size()}, caches[i].ssm_q.h));
    } else {
      f.add(detail::f32_split(p + "conv", caches[i].conv.data()));
      f.add(detail::f32_split(p + "ssm", caches[i].ssm.h));
    }
  }
  return f;
}

// With `qm`, quantized snapshots must also carry the model's formats.
inline ModelCaches caches_from_fmw(const FmwFile& f, const ModelConfig& c, bool quantized,
                                   const QuantModel* qm = nullptr) {
  ModelCaches caches = zero_caches(c);
  for (std::size_t i = 0; i < caches.size(); ++i) {
    const std::string p = "cache." + std::to_string(i) + ".";
    const std::size_t wn = (c.d_conv - 1) * c.conv_channels(), sn = ssm_dims(c).state_size();
    if (quantized) {
      const auto conv = f.get(p + "conv").codes();
      const auto ssm = f.get(p + "ssm").codes();
      require(conv.size() == wn && ssm.size() == sn, Errc::cache_mismatch, "cache " + p + " does not match config");
      if (qm) {
        require(f.get(p + "conv").frac == qm->layers[i].conv.in.frac && f.get(p + "ssm").frac == qm->layers[i].ssm.fmt.H.frac,
                Errc::cache_mismatch, "cache " + p + " was written with different formats");
      }
      caches[i].conv_q = Matrix<std::int32_t>(c.d_conv - 1, c.conv_channels(), conv);
      caches[i].ssm_q.h = ssm;
    } else {
      caches[i].conv = MatrixD(c.d_conv - 1, c.conv_channels(), detail::f32_join(f, p + "conv", wn));
      caches[i].ssm.h = detail::f32_join(f, p + "ssm", sn);
    }
  }
  return caches;
}

// ---------------------------------------------------------------------------
// Model inputs
// ---------------------------------------------------------------------------

inline constexpr std::int64_t kMaxF32TokenId = std::int64_t{1} << 24;

inline FmwFile input_to_fmw(const ModelInput& in, const ModelConfig& c) {
  FmwFile f;
  if (c.vocab_size > 0) {
    std::vector<double> ids;
    for (std::int64_t t : in.tokens) {
      require(t >= 0 && t < kMaxF32TokenId, Errc::invalid_argument, "token id " + std::to_string(t) + " not storable");
      ids.push_back(static_cast<double>(t));
    }
    f.add(make_f32("tokens", {ids.size()}, ids));
  } else {
    f.add(detail::f32_mat("hidden", in.hidden));
  }
  return f;
}

inline ModelInput input_from_fmw(const FmwFile& f, const ModelConfig& c) {
  if (c.vocab_size > 0) {
    const FmwTensor& t = f.get("tokens");
    require(t.dtype == DType::f32 && t.dims.size() == 1, Errc::shape_mismatch, "tokens: expected f32 [L]");
    std::vector<std::int64_t> ids;
    for (double v : t.values()) {
      require(v >= 0.0 && v < static_cast<double>(kMaxF32TokenId) && v == std::floor(v), Errc::invalid_argument,
              "tokens: non-integer or out-of-range id");
      ids.push_back(static_cast<std::int64_t>(v));
    }
    return ModelInput::from_tokens(std::move(ids));
  }
  const FmwTensor& t = f.get("hidden");
  require(t.dtype == DType::f32 && t.dims.size() == 2 && t.dims[1] == c.d_model, Errc::shape_mismatch,
          "hidden: expected f32 [L, " + std::to_string(c.d_model) + "]");
  return ModelInput::from_hidden(MatrixD(t.dims[0], t.dims[1], t.values()));
}

}  // namespace fxm

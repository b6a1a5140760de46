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

// Selective state-space recurrence, one head at a time:
//
//   step 1   dt~ = softplus(dt + dt_bias)
//   step 2   Abar = exp(dt~ * A),  Q = dt~ * B
//   step 3   H' = Abar * H + Q (x) x,   y = H' C + D x
//
// Heads share B and C within a group (head h reads group h / (heads/groups)).
// The reference path runs in double; the quantized path runs every linear
// op through the VPU primitives on 16-bit PoT codes and both nonlinearities
// through the fixed-point nonlinear unit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fxmamba/error.hpp"
#include "fxmamba/fixpoint.hpp"
#include "fxmamba/matrix.hpp"
#include "fxmamba/nonlin_approx.hpp"

namespace fxm {

struct SsmDims {
  std::size_t n_heads = 1;
  std::size_t head_dim = 1;  // P
  std::size_t d_state = 1;   // N
  std::size_t n_groups = 1;  // B/C groups

  std::size_t inner() const { return n_heads * head_dim; }
  std::size_t bc_width() const { return n_groups * d_state; }
  std::size_t group_of(std::size_t head) const { return head / (n_heads / n_groups); }
  std::size_t state_size() const { return n_heads * head_dim * d_state; }
};

inline void validate(const SsmDims& d) {
  require(d.n_heads > 0 && d.head_dim > 0 && d.d_state > 0 && d.n_groups > 0, Errc::invalid_argument,
          "SSM dimensions must be positive");
  require(d.n_heads % d.n_groups == 0, Errc::invalid_argument, "n_heads must be a multiple of n_groups");
}

struct SsmParams {
  std::vector<double> A;        // per head, < 0
  std::vector<double> D;        // per head
  std::vector<double> dt_bias;  // per head
};

inline void validate(const SsmParams& p, const SsmDims& d) {
  require(p.A.size() == d.n_heads && p.D.size() == d.n_heads && p.dt_bias.size() == d.n_heads,
          Errc::shape_mismatch, "SSM parameters must have one entry per head");
  for (double a : p.A) require(a < 0.0, Errc::invalid_argument, "SSM A must be negative for every head");
}

// Per-sequence hidden state, heads x P x N.
template <typename T>
struct SsmStateT {
  std::vector<T> h;
};
using SsmState = SsmStateT<double>;

inline SsmState zero_state(const SsmDims& d) { return {std::vector<double>(d.state_size(), 0.0)}; }

// Inputs for L positions: x is L x (heads*P), B and C are L x (groups*N),
// dt is L x heads.
struct SsmSequence {
  MatrixD x, B, C, dt;

  std::size_t length() const { return x.rows(); }
};

inline void validate(const SsmSequence& s, const SsmDims& d) {
  const std::size_t l = s.x.rows();
  require(s.x.cols() == d.inner() && s.B.cols() == d.bc_width() && s.C.cols() == d.bc_width() &&
              s.dt.cols() == d.n_heads,
          Errc::shape_mismatch, "SSM input widths do not match dimensions");
  require(s.B.rows() == l && s.C.rows() == l && s.dt.rows() == l, Errc::shape_mismatch,
          "SSM inputs disagree on sequence length");
}

// Which nonlinearities the double path uses.
enum class Nonlinearity { exact, approx };

inline double softplus_exact(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double step1_delta(double dt, double dt_bias, Nonlinearity nl = Nonlinearity::exact) {
  const double s = dt + dt_bias;
  return nl == Nonlinearity::exact ? softplus_exact(s) : softplus_approx(s);
}

struct Discretized {
  double abar = 1.0;
  std::vector<double> q;
};

inline Discretized step2_discretize(double delta, double a, std::span<const double> b,
                                    Nonlinearity nl = Nonlinearity::exact) {
  Discretized out;
  const double arg = std::min(delta * a, 0.0);
  out.abar = nl == Nonlinearity::exact ? std::exp(arg) : exp_neg_approx(arg);
  out.q.resize(b.size());
  for (std::size_t n = 0; n < b.size(); ++n) out.q[n] = delta * b[n];
  return out;
}

// One head: h is P x N row-major, updated in place; returns y (length P).
inline std::vector<double> recurrence_step(std::span<double> h, double abar, std::span<const double> q,
                                           std::span<const double> x, std::span<const double> c, double d) {
  const std::size_t p_dim = x.size();
  const std::size_t n_dim = q.size();
  require(h.size() == p_dim * n_dim && c.size() == n_dim, Errc::shape_mismatch, "recurrence operand shape mismatch");
  std::vector<double> y(p_dim);
  for (std::size_t p = 0; p < p_dim; ++p) {
    double acc = 0.0;
    for (std::size_t n = 0; n < n_dim; ++n) {
      double& hv = h[p * n_dim + n];
      hv = abar * hv + q[n] * x[p];
      acc += c[n] * hv;
    }
    y[p] = acc + d * x[p];
  }
  return y;
}

// One position for all heads. Row spans follow the SsmSequence layout.
inline std::vector<double> ssm_decode_step(SsmState& state, std::span<const double> x, std::span<const double> b,
                                           std::span<const double> c, std::span<const double> dt,
                                           const SsmParams& params, const SsmDims& dims,
                                           Nonlinearity nl = Nonlinearity::exact) {
  require(state.h.size() == dims.state_size(), Errc::shape_mismatch, "SSM state size does not match dimensions");
  const std::size_t P = dims.head_dim, N = dims.d_state;
  std::vector<double> y(dims.inner());
  for (std::size_t hd = 0; hd < dims.n_heads; ++hd) {
    const std::size_t g = dims.group_of(hd);
    const double delta = step1_delta(dt[hd], params.dt_bias[hd], nl);
    const Discretized disc = step2_discretize(delta, params.A[hd], b.subspan(g * N, N), nl);
    const auto yh = recurrence_step(std::span<double>(state.h).subspan(hd * P * N, P * N), disc.abar, disc.q,
                                    x.subspan(hd * P, P), c.subspan(g * N, N), params.D[hd]);
    std::copy(yh.begin(), yh.end(), y.begin() + static_cast<std::ptrdiff_t>(hd * P));
  }
  return y;
}

struct SsmRun {
  MatrixD y;  // L x (heads*P)
  SsmState state;
};

inline SsmRun ssm_prefill(const SsmSequence& seq, const SsmParams& params, const SsmDims& dims,
                          Nonlinearity nl = Nonlinearity::exact, SsmState initial = {}) {
  validate(dims);
  validate(params, dims);
  validate(seq, dims);
  SsmRun run{MatrixD(seq.length(), dims.inner()), initial.h.empty() ? zero_state(dims) : std::move(initial)};
  for (std::size_t t = 0; t < seq.length(); ++t) {
    const auto y = ssm_decode_step(run.state, seq.x.row(t), seq.B.row(t), seq.C.row(t), seq.dt.row(t), params, dims, nl);
    std::copy(y.begin(), y.end(), run.y.row(t).begin());
  }
  return run;
}

// ---------------------------------------------------------------------------
// Quantized path
// ---------------------------------------------------------------------------

struct SsmFormats {
  FixFormat x{16, 10}, B{16, 10}, C{16, 10};
  FixFormat dt{16, 10};      // dt from the projection and dt_bias
  FixFormat dt_sum{16, 10};  // dt + dt_bias, nonlinear unit input
  FixFormat arg{16, 10};     // dt~ * A, nonlinear unit input
  FixFormat Q{16, 10};
  FixFormat H{16, 10};
  FixFormat Y{16, 10};
  FixFormat A{16, 10};
  FixFormat D{16, 10};

  friend bool operator==(const SsmFormats&, const SsmFormats&) = default;
};

inline constexpr int kDefaultActivationFrac = 10;
inline constexpr int kCalibrationHeadroomBits = 3;

// 16-bit format for an activation whose calibration peak is known, with
// kCalibrationHeadroomBits of integer headroom (plus `extra` more).
inline FixFormat activation_format(std::span<const double> sample, int extra = 0) {
  double peak = 0.0;
  for (double v : sample) {
    require(std::isfinite(v), Errc::non_finite, "non-finite calibration data");
    peak = std::max(peak, std::abs(v));
  }
  if (peak == 0.0) return {16, kDefaultActivationFrac - extra};
  return {16, -choose_pot_exponent(sample, 16) - kCalibrationHeadroomBits - extra};
}

// Parameters are known exactly, so they get the tightest PoT format.
inline FixFormat parameter_format(std::span<const double> values) {
  return {16, -choose_pot_exponent(values, 16)};
}

inline SsmFormats ssm_quant_calibrate(const SsmSequence& sample, const SsmParams& params, const SsmDims& dims) {
  require(sample.length() > 0, Errc::invalid_argument, "empty calibration sample");
  validate(dims);
  validate(params, dims);
  validate(sample, dims);

  std::vector<double> dt_sum, arg, q, h, y;
  SsmState state = zero_state(dims);
  const std::size_t N = dims.d_state;
  for (std::size_t t = 0; t < sample.length(); ++t) {
    for (std::size_t hd = 0; hd < dims.n_heads; ++hd) {
      const double s = sample.dt(t, hd) + params.dt_bias[hd];
      dt_sum.push_back(s);
      const double delta = softplus_approx(s);
      arg.push_back(delta * params.A[hd]);
      for (std::size_t n = 0; n < N; ++n) q.push_back(delta * sample.B(t, dims.group_of(hd) * N + n));
    }
    const auto yt = ssm_decode_step(state, sample.x.row(t), sample.B.row(t), sample.C.row(t), sample.dt.row(t),
                                    params, dims, Nonlinearity::approx);
    y.insert(y.end(), yt.begin(), yt.end());
    h.insert(h.end(), state.h.begin(), state.h.end());
  }

  SsmFormats f;
  f.x = activation_format(sample.x.data());
  f.B = activation_format(sample.B.data());
  f.C = activation_format(sample.C.data());
  std::vector<double> dt_all(sample.dt.data());
  dt_all.insert(dt_all.end(), params.dt_bias.begin(), params.dt_bias.end());
  f.dt = activation_format(dt_all);
  f.dt_sum = activation_format(dt_sum);
  f.arg = activation_format(arg);
  f.Q = activation_format(q);
  f.H = activation_format(h, 1);
  f.Y = activation_format(y);
  f.A = parameter_format(params.A);
  f.D = parameter_format(params.D);
  // The nonlinear unit needs at least -1 fraction bits on its inputs.
  f.dt_sum.frac = std::max(f.dt_sum.frac, -1);
  f.arg.frac = std::max(f.arg.frac, -1);
  return f;
}

struct QuantSsm {
  SsmDims dims;
  SsmFormats fmt;
  std::vector<std::int32_t> A, D, dt_bias;  // codes in fmt.A, fmt.D, fmt.dt
};

inline QuantSsm quantize_ssm(const SsmParams& params, const SsmDims& dims, const SsmFormats& fmt) {
  validate(dims);
  validate(params, dims);
  QuantSsm q{dims, fmt, {}, {}, {}};
  q.A = quantize_pot(params.A, fmt.A).codes;
  q.D = quantize_pot(params.D, fmt.D).codes;
  q.dt_bias = quantize_pot(params.dt_bias, fmt.dt).codes;
  for (std::int32_t a : q.A)
    require(a < 0, Errc::invalid_argument, "A quantizes to a non-negative code; widen its format");
  return q;
}

struct QuantSsmState {
  std::vector<std::int32_t> h;  // codes in fmt.H
};

inline QuantSsmState zero_quant_state(const SsmDims& d) { return {std::vector<std::int32_t>(d.state_size(), 0)}; }

struct SsmCounters {
  std::size_t saturated = 0;  // clamped writes across all VPU outputs
  std::size_t clamped = 0;    // positive exponential arguments forced to 0

  SsmCounters& operator+=(const SsmCounters& o) {
    saturated += o.saturated;
    clamped += o.clamped;
    return *this;
  }
};

// One position. Inputs must already be in the calibrated formats:
// x (heads*P, fmt.x), b and c (groups*N), dt (heads, fmt.dt).
inline FixTensor ssm_step_quant(QuantSsmState& state, const FixTensor& x, const FixTensor& b, const FixTensor& c,
                                const FixTensor& dt, const QuantSsm& q, SsmCounters& counters,
                                const NlUnit& nl = NlUnit{}) {
  const SsmDims& d = q.dims;
  const SsmFormats& f = q.fmt;
  const std::size_t H = d.n_heads, P = d.head_dim, N = d.d_state;
  require(x.size() == d.inner() && b.size() == d.bc_width() && c.size() == d.bc_width() && dt.size() == H,
          Errc::shape_mismatch, "quantized SSM input shape mismatch");
  require(x.fmt == f.x && b.fmt == f.B && c.fmt == f.C && dt.fmt == f.dt, Errc::invalid_argument,
          "quantized SSM inputs are not in the calibrated formats");
  require(state.h.size() == d.state_size(), Errc::shape_mismatch, "quantized SSM state size mismatch");

  // Step 1: dt + dt_bias on the PAU, SoftPlus on the nonlinear unit.
  const FixTensor bias = make_fix(q.dt_bias, f.dt);
  const FixTensor dt_sum = vpu_eval(VpuKind::PAU, dt, &bias, nullptr, f.dt_sum);
  const NlResult delta = nl.eval_tiled(NlMode::SoftPlus, dt_sum);

  // Step 2: Abar = exp(dt~ * A); Q = dt~ * B per head.
  const FixTensor a = make_fix(q.A, f.A);
  const FixTensor arg = vpu_eval(VpuKind::PMU, delta.out, &a, nullptr, f.arg);
  const NlResult abar = nl.eval_tiled(NlMode::Exp, arg);
  counters.saturated += dt_sum.saturated + delta.out.saturated + arg.saturated + abar.out.saturated;
  counters.clamped += abar.clamped;

  FixTensor y;
  y.shape = {d.inner()};
  y.fmt = f.Y;
  y.codes.resize(d.inner());

  FixTensor delta_n = make_fix(std::vector<std::int32_t>(N), delta.out.fmt);
  FixTensor b_n = make_fix(std::vector<std::int32_t>(N), f.B);
  FixTensor abar_pn = make_fix(std::vector<std::int32_t>(P * N), abar.out.fmt);
  FixTensor h_pn = make_fix(std::vector<std::int32_t>(P * N), f.H);
  FixTensor q_pn = make_fix(std::vector<std::int32_t>(P * N), f.Q);
  FixTensor x_pn = make_fix(std::vector<std::int32_t>(P * N), f.x);
  FixTensor c_n = make_fix(std::vector<std::int32_t>(N), f.C);
  FixTensor row = make_fix(std::vector<std::int32_t>(N), f.H);

  for (std::size_t hd = 0; hd < H; ++hd) {
    const std::size_t g = d.group_of(hd);
    std::fill(delta_n.codes.begin(), delta_n.codes.end(), delta.out.codes[hd]);
    std::copy_n(b.codes.begin() + static_cast<std::ptrdiff_t>(g * N), N, b_n.codes.begin());
    const FixTensor qv = vpu_eval(VpuKind::PMU, delta_n, &b_n, nullptr, f.Q);
    counters.saturated += qv.saturated;

    // Step 3: H' = Abar * H + Q (x) x on PMU/PMA lanes.
    std::fill(abar_pn.codes.begin(), abar_pn.codes.end(), abar.out.codes[hd]);
    std::copy_n(state.h.begin() + static_cast<std::ptrdiff_t>(hd * P * N), P * N, h_pn.codes.begin());
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t n = 0; n < N; ++n) {
        q_pn.codes[p * N + n] = qv.codes[n];
        x_pn.codes[p * N + n] = x.codes[hd * P + p];
      }
    }
    const FixTensor inject = vpu_eval(VpuKind::PMU, q_pn, &x_pn);
    const FixTensor h_new = vpu_eval(VpuKind::PMA, abar_pn, &h_pn, &inject, f.H);
    counters.saturated += inject.saturated + h_new.saturated;
    std::copy(h_new.codes.begin(), h_new.codes.end(), state.h.begin() + static_cast<std::ptrdiff_t>(hd * P * N));

    // y = H' C on MAT, then D x + hbar on PMA.
    std::copy_n(c.codes.begin() + static_cast<std::ptrdiff_t>(g * N), N, c_n.codes.begin());
    for (std::size_t p = 0; p < P; ++p) {
      std::copy_n(h_new.codes.begin() + static_cast<std::ptrdiff_t>(p * N), N, row.codes.begin());
      const FixTensor hbar = vpu_eval(VpuKind::MAT, row, &c_n);
      const FixTensor dv = make_fix({q.D[hd]}, f.D);
      const FixTensor xv = make_fix({x.codes[hd * P + p]}, f.x);
      const FixTensor yp = vpu_eval(VpuKind::PMA, dv, &xv, &hbar, f.Y);
      counters.saturated += hbar.saturated + yp.saturated;
      y.codes[hd * P + p] = yp.codes[0];
    }
  }
  return y;
}

struct QuantSsmRun {
  MatrixD y;  // dequantized, L x (heads*P)
  QuantSsmState state;
  SsmCounters counters;
};

// Float-in/float-out wrapper: quantizes each input row into the calibrated
// formats, runs the fixed-point recurrence, dequantizes the outputs.
inline QuantSsmRun ssm_prefill_quant(const SsmSequence& seq, const QuantSsm& q, QuantSsmState initial = {}) {
  validate(seq, q.dims);
  QuantSsmRun run{MatrixD(seq.length(), q.dims.inner()),
                  initial.h.empty() ? zero_quant_state(q.dims) : std::move(initial), {}};
  const NlUnit nl;
  for (std::size_t t = 0; t < seq.length(); ++t) {
    const FixTensor x = quantize_pot(seq.x.row(t), q.fmt.x);
    const FixTensor b = quantize_pot(seq.B.row(t), q.fmt.B);
    const FixTensor c = quantize_pot(seq.C.row(t), q.fmt.C);
    const FixTensor dt = quantize_pot(seq.dt.row(t), q.fmt.dt);
    run.counters.saturated += x.saturated + b.saturated + c.saturated + dt.saturated;
    const FixTensor y = ssm_step_quant(run.state, x, b, c, dt, q, run.counters, nl);
    for (std::size_t i = 0; i < y.size(); ++i) run.y(t, i) = y.value(i);
  }
  return run;
}

}  // namespace fxm

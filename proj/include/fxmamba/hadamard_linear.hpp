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

// Hadamard-rotated W8A8 linear layers.
//
// Activations X (l x d) and weights W (q x d) are split into m column groups of
// width n = d/m (a power of two). Each group is rotated by the unnormalised
// Sylvester matrix H_n, the concatenated rotated tensors get one symmetric
// int8 scale each, and the int8 group products are summed:
//
//   Y = sum_i Q(X_i H) Q(W_i H)^T * s_X * s_W / n
//
// The 1/n factor undoes the gain of the unnormalised transform, since
// (X H)(H^T W^T) = n X W^T.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fxmamba/error.hpp"
#include "fxmamba/fixpoint.hpp"
#include "fxmamba/matrix.hpp"
#include "fxmamba/parallel.hpp"

namespace fxm {

inline bool is_pow2(std::size_t n) { return n != 0 && std::has_single_bit(n); }

struct HadamardMatrix {
  std::size_t n = 0;
  std::vector<std::int8_t> entries;  // row-major n x n, values +-1

  int operator()(std::size_t r, std::size_t c) const { return entries[r * n + c]; }
};

inline HadamardMatrix build_hadamard(std::size_t n) {
  require(is_pow2(n), Errc::group_rule, "group dimension must be 2^k, got " + std::to_string(n));
  HadamardMatrix h{1, {1}};
  while (h.n < n) {
    const std::size_t k = h.n;
    std::vector<std::int8_t> next(4 * k * k);
    for (std::size_t r = 0; r < k; ++r) {
      for (std::size_t c = 0; c < k; ++c) {
        const std::int8_t v = h.entries[r * k + c];
        next[r * 2 * k + c] = v;
        next[r * 2 * k + c + k] = v;
        next[(r + k) * 2 * k + c] = v;
        next[(r + k) * 2 * k + c + k] = static_cast<std::int8_t>(-v);
      }
    }
    h = {2 * k, std::move(next)};
  }
  return h;
}

inline std::size_t group_width(std::size_t d, std::size_t m) {
  require(m > 0 && d % m == 0, Errc::group_rule,
          "feature dimension " + std::to_string(d) + " is not divisible into " + std::to_string(m) + " groups");
  const std::size_t n = d / m;
  require(is_pow2(n), Errc::group_rule, "group dimension must be 2^k, got d/m = " + std::to_string(n));
  return n;
}

// In-place fast Walsh-Hadamard transform in Sylvester (natural) order, i.e.
// v <- v H_n for a row vector v.
template <typename T>
void fwht(std::span<T> v) {
  const std::size_t n = v.size();
  for (std::size_t len = 1; len < n; len <<= 1) {
    for (std::size_t i = 0; i < n; i += 2 * len) {
      for (std::size_t j = i; j < i + len; ++j) {
        const T a = v[j];
        const T b = v[j + len];
        v[j] = a + b;
        v[j + len] = a - b;
      }
    }
  }
}

// Right-multiplies each column group of width d/m by H_{d/m}.
inline MatrixD hadamard_transform_groups(const MatrixD& x, std::size_t m) {
  const std::size_t n = group_width(x.cols(), m);
  MatrixD out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t g = 0; g < m; ++g) fwht(row.subspan(g * n, n));
  }
  return out;
}

// Symmetric int8 scale: max|x| / 127, or 1 for an all-zero tensor.
inline double find_scale(std::span<const double> x) {
  require(!x.empty(), Errc::invalid_argument, "cannot find a scale for an empty tensor");
  double peak = 0.0;
  for (double v : x) {
    require(std::isfinite(v), Errc::non_finite, "non-finite calibration data");
    peak = std::max(peak, std::abs(v));
  }
  return peak == 0.0 ? 1.0 : peak / 127.0;
}

inline std::int8_t quantize_int8(double x, double s, std::size_t* saturated = nullptr) {
  const double q = round_half_even(x / s);
  if (q > 127.0 || q < -128.0) {
    if (saturated) ++*saturated;
    return q > 0 ? std::int8_t{127} : std::int8_t{-128};
  }
  return static_cast<std::int8_t>(q);
}

inline std::vector<std::int8_t> quantize_int8(std::span<const double> x, double s) {
  require(s > 0.0, Errc::invalid_argument, "int8 scale must be positive");
  std::vector<std::int8_t> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = quantize_int8(x[i], s);
  return out;
}

// Integer multiply-and-shift pair approximating multiplication by 1/s:
// v / s ~= (v * coe) >> shift with coe in [2^(bits-1), 2^bits).
struct RequantParams {
  std::int64_t coe = 1;
  int shift = 0;
  int bits = 15;

  // Exact real value of the encoded multiplier.
  double factor() const { return std::ldexp(static_cast<double>(coe), -shift); }
  double real(double v) const { return v * factor(); }
  std::int64_t apply(std::int64_t v, int extra_shift = 0) const { return shift_round(v * coe, shift + extra_shift); }

  friend bool operator==(const RequantParams&, const RequantParams&) = default;
};

inline RequantParams requant_params(double s, int bits = 15) {
  require(s > 0.0 && std::isfinite(s), Errc::invalid_argument, "requantization scale must be positive and finite");
  const double r = 1.0 / s;
  int e = 0;
  std::frexp(r, &e);  // r = f * 2^e, f in [0.5, 1)
  RequantParams p;
  p.bits = bits;
  p.shift = bits - e;
  p.coe = static_cast<std::int64_t>(round_half_even(std::ldexp(r, p.shift)));
  if (p.coe == (std::int64_t{1} << bits)) {
    p.coe >>= 1;
    p.shift -= 1;
  }
  return p;
}

enum class ActScaling {
  dynamic,     // s_X from the current activation batch
  calibrated,  // s_X fixed at calibration time, stored as a requant pair
};

struct QuantLinearLayer {
  std::size_t d = 0;  // input features
  std::size_t q = 0;  // output features
  std::size_t m = 1;  // groups
  Matrix<std::int8_t> wq;  // q x d, group i in columns [i*d/m, (i+1)*d/m)
  float w_peak = 0.0f;     // max |W H|, rounded to float
  double s_w = 1.0;        // w_peak / 127, or 1 for zero weights
  RequantParams act;  // encodes 1/s_X for calibrated scaling
  bool calibrated = false;

  std::size_t width() const { return d / m; }
  // Activation scale the calibrated path actually applies.
  double calibrated_scale() const { return 1.0 / act.factor(); }
};

inline double weight_scale(float w_peak) { return w_peak == 0.0f ? 1.0 : static_cast<double>(w_peak) / 127.0; }

// Offline weight path: rotate each weight group, one per-tensor scale, int8.
// The peak is rounded to float so a layer reloaded from disk is identical.
inline QuantLinearLayer make_quant_linear(const MatrixD& w, std::size_t m) {
  QuantLinearLayer layer;
  layer.q = w.rows();
  layer.d = w.cols();
  layer.m = m;
  group_width(layer.d, m);
  const MatrixD wh = hadamard_transform_groups(w, m);
  find_scale(wh.data());  // finiteness check
  double peak = 0.0;
  for (double v : wh.data()) peak = std::max(peak, std::abs(v));
  layer.w_peak = static_cast<float>(peak);
  layer.s_w = weight_scale(layer.w_peak);
  layer.wq = Matrix<std::int8_t>(layer.q, layer.d, quantize_int8(wh.data(), layer.s_w));
  layer.act = requant_params(1.0);
  return layer;
}

inline void calibrate_activation(QuantLinearLayer& layer, const MatrixD& x_sample) {
  require(x_sample.cols() == layer.d, Errc::shape_mismatch, "calibration sample width does not match layer");
  const MatrixD xh = hadamard_transform_groups(x_sample, layer.m);
  layer.act = requant_params(find_scale(xh.data()));
  layer.calibrated = true;
}

struct QuantLinearOutput {
  MatrixD y;
  double act_scale = 1.0;
  std::size_t saturated = 0;  // activation codes clamped to int8
};

// Integer core shared by every activation-scaling mode.
inline QuantLinearOutput quantized_linear_scaled(const MatrixD& x, const QuantLinearLayer& layer, double s_x,
                                                 unsigned threads = 1) {
  require(x.cols() == layer.d, Errc::shape_mismatch,
          "linear input width " + std::to_string(x.cols()) + " != layer input " + std::to_string(layer.d));
  require(s_x > 0.0, Errc::invalid_argument, "activation scale must be positive");
  const MatrixD xh = hadamard_transform_groups(x, layer.m);
  const std::size_t n = layer.width();

  QuantLinearOutput out;
  out.act_scale = s_x;
  out.y = MatrixD(x.rows(), layer.q);
  std::vector<std::size_t> sat(x.rows(), 0);
  parallel_for(x.rows(), threads, [&](std::size_t begin, std::size_t end) {
    std::vector<std::int32_t> xq(layer.d);
    for (std::size_t r = begin; r < end; ++r) {
      for (std::size_t k = 0; k < layer.d; ++k) xq[k] = quantize_int8(xh(r, k), s_x, &sat[r]);
      for (std::size_t o = 0; o < layer.q; ++o) {
        const auto w = layer.wq.row(o);
        std::int32_t acc = 0;
        for (std::size_t k = 0; k < layer.d; ++k) acc += xq[k] * w[k];
        out.y(r, o) = static_cast<double>(acc) * s_x * layer.s_w / static_cast<double>(n);
      }
    }
  });
  for (std::size_t s : sat) out.saturated += s;
  return out;
}

inline QuantLinearOutput quantized_linear_ex(const MatrixD& x, const QuantLinearLayer& layer,
                                             ActScaling mode = ActScaling::dynamic, unsigned threads = 1) {
  require(x.cols() == layer.d, Errc::shape_mismatch,
          "linear input width " + std::to_string(x.cols()) + " != layer input " + std::to_string(layer.d));
  double s_x = 1.0;
  if (mode == ActScaling::dynamic) {
    s_x = x.empty() ? 1.0 : find_scale(hadamard_transform_groups(x, layer.m).data());
  } else {
    require(layer.calibrated, Errc::invalid_argument, "layer has no calibrated activation scale");
    s_x = layer.calibrated_scale();
  }
  return quantized_linear_scaled(x, layer, s_x, threads);
}

inline MatrixD quantized_linear(const MatrixD& x, const QuantLinearLayer& layer,
                                ActScaling mode = ActScaling::dynamic, unsigned threads = 1) {
  return quantized_linear_ex(x, layer, mode, threads).y;
}

// Per-tensor symmetric W8A8 without rotation; the baseline the rotated
// layer is measured against.
inline MatrixD plain_w8a8_linear(const MatrixD& x, const MatrixD& w) {
  require(x.cols() == w.cols(), Errc::shape_mismatch, "plain linear shape mismatch");
  const double s_x = find_scale(x.data());
  const double s_w = find_scale(w.data());
  const auto xq = quantize_int8(x.data(), s_x);
  const auto wq = quantize_int8(w.data(), s_w);
  MatrixD y(x.rows(), w.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t o = 0; o < w.rows(); ++o) {
      std::int32_t acc = 0;
      for (std::size_t k = 0; k < x.cols(); ++k)
        acc += std::int32_t{xq[r * x.cols() + k]} * wq[o * w.cols() + k];
      y(r, o) = static_cast<double>(acc) * s_x * s_w;
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Hardware datapath of the linear module.
//
// Per group: HAT units form the rotated activations by summing sign-recoded
// 16-bit input codes, a (x s_coe, >> s_shift) stage maps them onto int8, and
// MAT units take int8 dot products against the pre-rotated weights. Group
// partial sums are reduced in the accumulator, then a 31-bit output rescale
// writes the requested fixed-point format.
// ---------------------------------------------------------------------------

struct HwLinearResult {
  FixTensor y;              // l x q in the requested format
  RequantParams act;        // input requantization pair actually used
  double act_scale = 1.0;   // real activation scale implied by `act`
  std::size_t act_saturated = 0;
};

inline HwLinearResult hw_quantized_linear(const FixTensor& x, const QuantLinearLayer& layer, const FixFormat& out_fmt,
                                          ActScaling mode = ActScaling::dynamic) {
  require(x.shape.size() == 2 && x.shape[1] == layer.d, Errc::shape_mismatch, "hw linear input must be l x d");
  validate(out_fmt);
  const std::size_t rows = x.shape[0];
  const std::size_t n = layer.width();
  const HadamardMatrix h = build_hadamard(n);

  // Hadamard products: one HAT per rotated feature over sign-recoded inputs.
  std::vector<std::int64_t> xh(rows * layer.d);
  FixTensor lane = make_fix(std::vector<std::int32_t>(n), x.fmt);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < layer.m; ++g) {
      const std::size_t base = r * layer.d + g * n;
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < n; ++i) lane.codes[i] = h(i, j) > 0 ? x.codes[base + i] : -x.codes[base + i];
        xh[base + j] = vpu_eval(VpuKind::HAT, lane).codes[0];
      }
    }
  }

  HwLinearResult res;
  if (mode == ActScaling::dynamic) {
    std::int64_t peak = 0;
    for (std::int64_t v : xh) peak = std::max(peak, v < 0 ? -v : v);
    res.act = requant_params(peak == 0 ? 1.0 : std::ldexp(static_cast<double>(peak), -x.fmt.frac) / 127.0);
  } else {
    require(layer.calibrated, Errc::invalid_argument, "layer has no calibrated activation scale");
    res.act = layer.act;
  }
  res.act_scale = 1.0 / res.act.factor();

  const FixFormat i8{8, 0};
  std::vector<std::int32_t> xq(xh.size());
  for (std::size_t k = 0; k < xh.size(); ++k) xq[k] = saturate(res.act.apply(xh[k], x.fmt.frac), i8, res.act_saturated);

  const double out_mult = res.act_scale * layer.s_w / static_cast<double>(n) * std::ldexp(1.0, out_fmt.frac);
  res.y.shape = {rows, layer.q};
  res.y.fmt = out_fmt;
  res.y.codes.assign(rows * layer.q, 0);
  if (out_mult == 0.0) return res;
  const RequantParams rescale = requant_params(1.0 / out_mult, 31);

  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < layer.q; ++o) {
      const auto w = layer.wq.row(o);
      std::int64_t acc = 0;
      for (std::size_t g = 0; g < layer.m; ++g) {
        std::int64_t partial = 0;
        for (std::size_t j = 0; j < n; ++j) partial += std::int64_t{xq[r * layer.d + g * n + j]} * w[g * n + j];
        acc += partial;
      }
      res.y.codes[r * layer.q + o] = saturate(rescale.apply(acc), out_fmt, res.y.saturated);
    }
  }
  return res;
}

}  // namespace fxm

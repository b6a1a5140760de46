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

// Shift-and-PWL exponential and SoftPlus.
//
// For x <= 0:  e^x = 2^(x log2e) = 2^u * 2^v, with u = ceil(t) <= 0 and
// v = t - u in (-1, 0]. 2^v comes from an 8-chord table over (-1, 0] and 2^u
// is a right shift by |u|. log2e is truncated to (1.0111)_2 = 23/16.
//
// SoftPlus uses sp(x) = x + sp(-x) and ln(1 + e^x) ~ e^x, giving
//   sp(x) = e^x          for x <= 0
//   sp(x) = e^-x + x     for x > 0
// so positive inputs reuse the exponential after negation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>

#include "fxmamba/error.hpp"
#include "fxmamba/fixpoint.hpp"

namespace fxm {

inline constexpr int kLog2eCode = 23;  // (1.0111)_2 with 4 fraction bits
inline constexpr int kLog2eFrac = 4;
inline constexpr double kLog2e = 23.0 / 16.0;

inline constexpr int kPwlSegments = 8;
inline constexpr int kSlopeFrac = 15;
inline constexpr int kInterceptFrac = 14;

// Output formats of the nonlinear unit.
inline constexpr FixFormat kExpOutFormat{16, 14};
inline constexpr FixFormat kSoftPlusOutFormat{16, 12};

struct PwlSegment {
  double v_lo = 0.0;
  double slope = 0.0;
  double intercept = 0.0;
  std::int32_t slope_code = 0;      // kSlopeFrac fraction bits
  std::int32_t intercept_code = 0;  // kInterceptFrac fraction bits
};

struct PwlTable {
  std::array<PwlSegment, kPwlSegments> segments{};

  // Segment k covers (v_lo, v_lo + 1/8]; v = -1 falls into segment 0.
  static int segment_of(double v) {
    const int k = static_cast<int>(std::ceil((v + 1.0) * kPwlSegments)) - 1;
    return std::clamp(k, 0, kPwlSegments - 1);
  }

  double eval(double v) const {
    const PwlSegment& s = segments[static_cast<std::size_t>(segment_of(v))];
    return s.slope * v + s.intercept;
  }
};

// Chords through (v_lo, 2^v_lo) and (v_lo + 1/8, 2^(v_lo + 1/8)).
inline PwlTable build_pwl_table() {
  PwlTable t;
  const double h = 1.0 / kPwlSegments;
  for (int k = 0; k < kPwlSegments; ++k) {
    PwlSegment& s = t.segments[static_cast<std::size_t>(k)];
    s.v_lo = -1.0 + k * h;
    const double lo = std::exp2(s.v_lo);
    const double hi = std::exp2(s.v_lo + h);
    s.slope = (hi - lo) / h;
    s.intercept = lo - s.slope * s.v_lo;
    s.slope_code = static_cast<std::int32_t>(round_half_even(std::ldexp(s.slope, kSlopeFrac)));
    s.intercept_code = static_cast<std::int32_t>(round_half_even(std::ldexp(s.intercept, kInterceptFrac)));
  }
  return t;
}

inline const PwlTable& default_pwl_table() {
  static const PwlTable table = build_pwl_table();
  return table;
}

struct SplitUV {
  std::int64_t u = 0;  // <= 0
  double v = 0.0;      // in (-1, 0]
};

inline SplitUV split_uv(double t) {
  require(t <= 0.0, Errc::invalid_argument, "split_uv requires a non-positive argument");
  const double c = std::ceil(t);
  return {static_cast<std::int64_t>(c), t - c};
}

inline double exp_neg_approx(double x, const PwlTable& table = default_pwl_table()) {
  require(x <= 0.0, Errc::invalid_argument, "exponential mode requires non-positive input");
  const SplitUV s = split_uv(x * kLog2e);
  return std::ldexp(table.eval(s.v), static_cast<int>(std::max<std::int64_t>(s.u, -2000)));
}

inline double softplus_approx(double x, const PwlTable& table = default_pwl_table()) {
  const double a = std::abs(x);
  // e is re-expressed as (a + e) - a, which is exact whenever a >= e or a
  // sits on a 2^-53 grid; then sp(x) - sp(-x) == x holds without rounding.
  const double sum = a + exp_neg_approx(-a, table);
  const double e = sum - a;
  return x > 0.0 ? sum : e;
}

// ---------------------------------------------------------------------------
// Fixed-point nonlinear unit.
//
// Preprocessing: in SoftPlus mode the RPU negates positive lanes while the
// delay unit holds the original value. EXP-INT evaluates the shift+PWL
// exponential on 16-bit codes and emits kExpOutFormat. Postprocessing adds the
// delayed value back for the lanes that were negated.
// ---------------------------------------------------------------------------

enum class NlMode { Exp, SoftPlus };

struct NlResult {
  FixTensor out;
  std::size_t clamped = 0;  // positive lanes forced to 0 in Exp mode
};

namespace detail {

// e^(code * 2^-frac) for code <= 0, as a code in kExpOutFormat.
inline std::int64_t exp_int(std::int64_t code, int frac, const PwlTable& table) {
  const int tf = frac + kLog2eFrac;
  const std::int64_t t = code * kLog2eCode;  // tf fraction bits, <= 0
  const std::int64_t one = std::int64_t{1} << tf;
  const std::int64_t u = -((-t) >> tf);  // ceil(t / one)
  const std::int64_t v = t - u * one;    // (-one, 0]
  const int k = std::clamp(static_cast<int>((v + one + (one >> 3) - 1) / (one >> 3)) - 1, 0, kPwlSegments - 1);
  const PwlSegment& s = table.segments[static_cast<std::size_t>(k)];
  const int pf = kSlopeFrac + tf;
  const std::int64_t p = std::int64_t{s.slope_code} * v + (std::int64_t{s.intercept_code} << (pf - kInterceptFrac));
  const std::int64_t shift = pf - kExpOutFormat.frac - u;
  return shift > 62 ? 0 : shift_round(p, static_cast<int>(shift));
}

}  // namespace detail

class NlUnit {
 public:
  explicit NlUnit(std::size_t lanes = 24, const PwlTable& table = default_pwl_table()) : lanes_(lanes), table_(table) {}

  std::size_t lanes() const { return lanes_; }
  const PwlTable& table() const { return table_; }

  static FixFormat out_format(NlMode mode) { return mode == NlMode::Exp ? kExpOutFormat : kSoftPlusOutFormat; }

  // One pass over exactly lanes() inputs.
  NlResult eval(NlMode mode, const FixTensor& in) const {
    require(in.size() == lanes_, Errc::shape_mismatch,
            "nonlinear unit expects " + std::to_string(lanes_) + " lanes, got " + std::to_string(in.size()));
    return run(mode, in);
  }

  // Any length; lanes are processed in passes of lanes().
  NlResult eval_tiled(NlMode mode, const FixTensor& in) const { return run(mode, in); }

 private:
  NlResult run(NlMode mode, const FixTensor& in) const {
    require(in.fmt.width == 16, Errc::invalid_argument, "nonlinear unit takes 16-bit inputs");
    require(in.fmt.frac >= -1, Errc::invalid_argument, "nonlinear unit input needs at least -1 fraction bits");
    const FixFormat out_fmt = out_format(mode);
    NlResult r;
    r.out.shape = in.shape;
    r.out.fmt = out_fmt;
    r.out.codes.resize(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
      std::int64_t x = in.codes[i];
      std::int64_t delayed = 0;
      bool add_back = false;
      if (x > 0) {
        if (mode == NlMode::Exp) {
          x = 0;
          ++r.clamped;
        } else {
          delayed = x;
          add_back = true;
          x = -x;
        }
      }
      const std::int64_t e = detail::exp_int(x, in.fmt.frac, table_);
      if (mode == NlMode::Exp) {
        r.out.codes[i] = saturate(e, out_fmt, r.out.saturated);
      } else {
        const int f = std::max(kExpOutFormat.frac, in.fmt.frac);
        std::int64_t acc = detail::align(e, kExpOutFormat.frac, f);
        if (add_back) acc += detail::align(delayed, in.fmt.frac, f);
        r.out.codes[i] = narrow(acc, f, out_fmt, r.out.saturated);
      }
    }
    return r;
  }

  std::size_t lanes_;
  PwlTable table_;
};

}  // namespace fxm

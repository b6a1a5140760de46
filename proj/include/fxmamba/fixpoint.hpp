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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fxmamba/error.hpp"
#include "fxmamba/matrix.hpp"

namespace fxm {

// Signed fixed-point format. A code c represents c * 2^-frac; the
// power-of-two exponent p of a PoT scale is -frac.
struct FixFormat {
  int width = 16;
  int frac = 0;

  constexpr std::int64_t max_code() const { return (std::int64_t{1} << (width - 1)) - 1; }
  constexpr std::int64_t min_code() const { return -(std::int64_t{1} << (width - 1)); }
  double ulp() const { return std::ldexp(1.0, -frac); }
  int exponent() const { return -frac; }

  friend bool operator==(const FixFormat&, const FixFormat&) = default;
};

inline void validate(const FixFormat& f) {
  require(f.width == 8 || f.width == 16 || f.width == 32, Errc::invalid_argument,
          "fixed-point width must be 8, 16 or 32, got " + std::to_string(f.width));
}

struct FixTensor {
  std::vector<std::size_t> shape;
  std::vector<std::int32_t> codes;
  FixFormat fmt;
  // Number of codes clamped while this tensor was produced.
  std::size_t saturated = 0;

  std::size_t size() const noexcept { return codes.size(); }
  double value(std::size_t i) const { return std::ldexp(static_cast<double>(codes[i]), -fmt.frac); }
};

inline FixTensor make_fix(std::vector<std::int32_t> codes, FixFormat fmt) {
  FixTensor t;
  t.shape = {codes.size()};
  t.codes = std::move(codes);
  t.fmt = fmt;
  return t;
}

// Ties to even; relies on the default FE_TONEAREST environment.
inline double round_half_even(double x) { return std::nearbyint(x); }

// v * 2^-shift with round-half-to-even. Non-positive shifts are exact left shifts.
inline std::int64_t shift_round(std::int64_t v, int shift) {
  if (shift <= 0) return v * (std::int64_t{1} << std::min(-shift, 62));
  if (shift > 62) return 0;
  const std::int64_t q = v >> shift;
  const std::int64_t r = v - q * (std::int64_t{1} << shift);
  const std::int64_t half = std::int64_t{1} << (shift - 1);
  if (r > half || (r == half && (q & 1))) return q + 1;
  return q;
}

inline std::int32_t saturate(std::int64_t v, const FixFormat& f, std::size_t& sat) {
  if (v > f.max_code()) {
    ++sat;
    return static_cast<std::int32_t>(f.max_code());
  }
  if (v < f.min_code()) {
    ++sat;
    return static_cast<std::int32_t>(f.min_code());
  }
  return static_cast<std::int32_t>(v);
}

// Re-expresses a code held with `from_frac` fraction bits in `to`.
inline std::int32_t narrow(std::int64_t code, int from_frac, const FixFormat& to, std::size_t& sat) {
  return saturate(shift_round(code, from_frac - to.frac), to, sat);
}

// Smallest p with max|x| / 2^p <= 2^(width-1) - 1; zero input gives p = 0.
inline int choose_pot_exponent(std::span<const double> x, int width) {
  require(!x.empty(), Errc::invalid_argument, "empty calibration data");
  double peak = 0.0;
  for (double v : x) {
    require(std::isfinite(v), Errc::non_finite, "non-finite calibration data");
    peak = std::max(peak, std::abs(v));
  }
  if (peak == 0.0) return 0;
  const double qmax = std::ldexp(1.0, width - 1) - 1.0;
  int p = static_cast<int>(std::ceil(std::log2(peak / qmax)));
  while (std::ldexp(peak, -p) > qmax) ++p;
  while (std::ldexp(peak, -(p - 1)) <= qmax) --p;
  return p;
}

inline FixTensor quantize_pot(std::span<const double> x, const FixFormat& fmt,
                              std::vector<std::size_t> shape = {}) {
  validate(fmt);
  FixTensor t;
  t.shape = shape.empty() ? std::vector<std::size_t>{x.size()} : std::move(shape);
  t.fmt = fmt;
  t.codes.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double scaled = round_half_even(std::ldexp(x[i], fmt.frac));
    const double lo = static_cast<double>(fmt.min_code());
    const double hi = static_cast<double>(fmt.max_code());
    if (!(scaled >= lo)) {  // also catches NaN
      t.codes[i] = static_cast<std::int32_t>(fmt.min_code());
      ++t.saturated;
    } else if (scaled > hi) {
      t.codes[i] = static_cast<std::int32_t>(fmt.max_code());
      ++t.saturated;
    } else {
      t.codes[i] = static_cast<std::int32_t>(scaled);
    }
  }
  return t;
}

inline FixTensor quantize_pot(const MatrixD& x, const FixFormat& fmt) {
  return quantize_pot(std::span<const double>(x.data()), fmt, {x.rows(), x.cols()});
}

inline std::vector<double> dequantize(const FixTensor& t) {
  std::vector<double> out(t.codes.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.value(i);
  return out;
}

inline FixTensor requantize(const FixTensor& t, const FixFormat& to) {
  validate(to);
  FixTensor out;
  out.shape = t.shape;
  out.fmt = to;
  out.codes.resize(t.codes.size());
  for (std::size_t i = 0; i < t.codes.size(); ++i) out.codes[i] = narrow(t.codes[i], t.fmt.frac, to, out.saturated);
  return out;
}

// ---------------------------------------------------------------------------
// Vector processing units.
//
//   PAU  A + B        -> vector
//   PMU  A * B        -> vector
//   PMA  A * B + C    -> vector
//   HAT  sum(A)       -> scalar
//   MAT  sum(A * B)   -> scalar
//
// Products carry frac(A) + frac(B) fraction bits; additions align operands to
// the finer of the two grids. Accumulation is exact (64-bit internal), and the
// single narrowing to the output format rounds half-to-even and saturates.
// Without an explicit output format the result is a 32-bit code on the
// accumulator grid.
// ---------------------------------------------------------------------------

enum class VpuKind { PAU, PMU, PMA, HAT, MAT };

inline const char* vpu_name(VpuKind k) {
  switch (k) {
    case VpuKind::PAU: return "PAU";
    case VpuKind::PMU: return "PMU";
    case VpuKind::PMA: return "PMA";
    case VpuKind::HAT: return "HAT";
    case VpuKind::MAT: return "MAT";
  }
  return "?";
}

namespace detail {

inline std::int64_t align(std::int64_t code, int from_frac, int to_frac) {
  return code * (std::int64_t{1} << (to_frac - from_frac));
}

inline void check_operand(const FixTensor* t, std::size_t n, VpuKind kind, const char* name) {
  require(t != nullptr, Errc::invalid_argument,
          std::string(vpu_name(kind)) + " requires operand " + name);
  require(t->size() == n, Errc::shape_mismatch,
          std::string(vpu_name(kind)) + " operand length mismatch on " + name);
}

}  // namespace detail

inline FixTensor vpu_eval(VpuKind kind, const FixTensor& a, const FixTensor* b = nullptr,
                          const FixTensor* c = nullptr, std::optional<FixFormat> out_fmt = std::nullopt) {
  const std::size_t n = a.size();
  std::vector<std::int64_t> acc;
  int acc_frac = a.fmt.frac;

  switch (kind) {
    case VpuKind::PAU: {
      detail::check_operand(b, n, kind, "B");
      acc_frac = std::max(a.fmt.frac, b->fmt.frac);
      acc.resize(n);
      for (std::size_t i = 0; i < n; ++i)
        acc[i] = detail::align(a.codes[i], a.fmt.frac, acc_frac) + detail::align(b->codes[i], b->fmt.frac, acc_frac);
      break;
    }
    case VpuKind::PMU: {
      detail::check_operand(b, n, kind, "B");
      acc_frac = a.fmt.frac + b->fmt.frac;
      acc.resize(n);
      for (std::size_t i = 0; i < n; ++i) acc[i] = std::int64_t{a.codes[i]} * b->codes[i];
      break;
    }
    case VpuKind::PMA: {
      detail::check_operand(b, n, kind, "B");
      detail::check_operand(c, n, kind, "C");
      const int prod_frac = a.fmt.frac + b->fmt.frac;
      acc_frac = std::max(prod_frac, c->fmt.frac);
      acc.resize(n);
      for (std::size_t i = 0; i < n; ++i)
        acc[i] = detail::align(std::int64_t{a.codes[i]} * b->codes[i], prod_frac, acc_frac) +
                 detail::align(c->codes[i], c->fmt.frac, acc_frac);
      break;
    }
    case VpuKind::HAT: {
      std::int64_t s = 0;
      for (std::size_t i = 0; i < n; ++i) s += a.codes[i];
      acc.assign(1, s);
      break;
    }
    case VpuKind::MAT: {
      detail::check_operand(b, n, kind, "B");
      acc_frac = a.fmt.frac + b->fmt.frac;
      std::int64_t s = 0;
      for (std::size_t i = 0; i < n; ++i) s += std::int64_t{a.codes[i]} * b->codes[i];
      acc.assign(1, s);
      break;
    }
  }

  const FixFormat fmt = out_fmt.value_or(FixFormat{32, acc_frac});
  validate(fmt);
  FixTensor out;
  out.shape = {acc.size()};
  out.fmt = fmt;
  out.codes.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.codes[i] = narrow(acc[i], acc_frac, fmt, out.saturated);
  return out;
}

}  // namespace fxm

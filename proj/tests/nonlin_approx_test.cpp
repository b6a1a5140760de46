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
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fxmamba/nonlin_approx.hpp"
#include "fxmamba/random.hpp"
#include "support/oracles.hpp"

namespace fxm {
namespace {

// Frozen from tests/oracle/pwl_exp_oracle.py.
constexpr double kExpSweepBound = 1.73e-3;  // observed 1.7221e-3
constexpr double kChordBound = 9.0e-4;      // observed 8.988e-4
constexpr double kExpAtMinusOne = 0.3695530484726295;
constexpr double kExpAtMinusLn2 = 0.5013282009768626;
constexpr double kExpAtMinusThree = 0.05037505712367765;

TEST(PwlTable, Construction) {
  const PwlTable t = build_pwl_table();
  for (int k = 0; k < kPwlSegments; ++k) {
    const PwlSegment& s = t.segments[static_cast<std::size_t>(k)];
    EXPECT_DOUBLE_EQ(s.v_lo, -1.0 + k / 8.0);
    EXPECT_NEAR(s.slope * s.v_lo + s.intercept, std::exp2(s.v_lo), 1e-15);
    EXPECT_NEAR(s.slope * (s.v_lo + 0.125) + s.intercept, std::exp2(s.v_lo + 0.125), 1e-15);
    EXPECT_LE(std::abs(s.slope_code - std::ldexp(s.slope, kSlopeFrac)), 0.5);
    EXPECT_LE(std::abs(s.intercept_code - std::ldexp(s.intercept, kInterceptFrac)), 0.5);
  }
  // Top segment: chord from 2^(-1/8) to 1.
  EXPECT_NEAR(t.segments[7].slope, 0.66400, 5e-5);
  EXPECT_EQ(t.eval(0.0), 1.0);
  EXPECT_NEAR(t.eval(-1.0 + 1e-12), 0.5, 1e-9);
}

TEST(PwlTable, ChordErrorSweep) {
  const PwlTable t = build_pwl_table();
  double worst = 0.0;
  for (int i = 1; i <= 1000000; ++i) {
    const double v = -1.0 + i * 1e-6;
    worst = std::max(worst, std::abs(t.eval(v) - std::exp2(v)));
    ASSERT_NEAR(t.eval(v), oracle::chord_exp2(v), 1e-15);
  }
  EXPECT_LE(worst, kChordBound);
  EXPECT_LE(worst, 1.1e-3);
  // Analytic bound f''h^2/8 with f'' <= ln(2)^2 on (-1, 0].
  EXPECT_LE(worst, std::log(2.0) * std::log(2.0) / 64.0 / 8.0);
}

TEST(Log2e, Constant) {
  EXPECT_EQ(kLog2e, 1.4375);
  EXPECT_EQ(static_cast<double>(kLog2eCode) / (1 << kLog2eFrac), kLog2e);
}

TEST(SplitUV, Examples) {
  EXPECT_EQ(split_uv(0.0).u, 0);
  EXPECT_EQ(split_uv(0.0).v, 0.0);
  EXPECT_EQ(split_uv(-1.4375).u, -1);
  EXPECT_EQ(split_uv(-1.4375).v, -0.4375);
  EXPECT_EQ(split_uv(-0.99636).u, 0);
  EXPECT_EQ(split_uv(-0.99636).v, -0.99636);
  EXPECT_EQ(split_uv(-2.0).u, -2);
  EXPECT_EQ(split_uv(-2.0).v, 0.0);
  EXPECT_THROW(split_uv(0.5), Error);
}

TEST(ExpNegApprox, Examples) {
  EXPECT_EQ(exp_neg_approx(0.0), 1.0);
  EXPECT_NEAR(exp_neg_approx(-0.6931), kExpAtMinusLn2, 1e-15);
  EXPECT_NEAR(exp_neg_approx(-1.0), kExpAtMinusOne, 1e-15);
  EXPECT_NEAR(exp_neg_approx(-3.0), kExpAtMinusThree, 1e-15);
  try {
    exp_neg_approx(0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "exponential mode requires non-positive input");
  }
}

TEST(ExpNegApprox, DenseSweepBoundAndMonotonicity) {
  double worst = 0.0;
  double prev = 0.0;
  for (int i = 160000; i >= 0; --i) {
    const double x = -i * 1e-4;
    const double e = exp_neg_approx(x);
    ASSERT_GT(e, 0.0);
    ASSERT_LE(e, 1.0);
    ASSERT_GE(e, prev) << x;
    prev = e;
    ASSERT_NEAR(e, oracle::exp_shift_pwl(x), 1e-15);
    worst = std::max(worst, std::abs(e - std::exp(x)));
  }
  EXPECT_LE(worst, kExpSweepBound);
}

TEST(SoftplusApprox, Examples) {
  EXPECT_EQ(softplus_approx(0.0), 1.0);
  EXPECT_NEAR(softplus_approx(3.0), 3.0 + kExpAtMinusThree, 1e-14);
  EXPECT_NEAR(softplus_approx(-3.0), kExpAtMinusThree, 1e-14);
}

// Inputs are 16-bit codes at a random binary point, the domain the unit sees.
TEST(SoftplusApprox, SymmetryIsExactOnFixedPointInputs) {
  Rng rng(31);
  for (int i = 0; i < 1000000; ++i) {
    const auto code = static_cast<std::int64_t>(rng.index(65535)) - 32767;
    const double x = std::ldexp(static_cast<double>(code), -static_cast<int>(rng.index(15)));
    ASSERT_EQ(softplus_approx(x) - softplus_approx(-x) - x, 0.0) << x;
  }
}

// Above the crossover a >= e the identity holds for any double.
TEST(SoftplusApprox, SymmetryIsExactForLargeMagnitudes) {
  Rng rng(33);
  for (int i = 0; i < 1000000; ++i) {
    const double x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.6, 64.0);
    ASSERT_EQ(softplus_approx(x) - softplus_approx(-x) - x, 0.0) << x;
  }
}

TEST(SoftplusApprox, StaysAboveReluOverWorkingRange) {
  Rng rng(32);
  for (int i = 0; i < 100000; ++i) {
    const double x = rng.uniform(-16.0, 16.0);
    const double s = softplus_approx(x);
    ASSERT_GT(s, 0.0);
    ASSERT_GT(s, x);
  }
}

FixTensor lanes_of(const std::vector<double>& x, FixFormat f) { return quantize_pot(x, f); }

TEST(NlUnit, SoftPlusOfZeroIsOne) {
  const NlUnit unit;
  const NlResult r = unit.eval(NlMode::SoftPlus, lanes_of(std::vector<double>(24, 0.0), {16, 10}));
  for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(r.out.value(i), 1.0);
}

TEST(NlUnit, ExpOfMinusOne) {
  const NlUnit unit;
  std::vector<double> x(24, 0.0);
  x[5] = -1.0;
  const NlResult r = unit.eval(NlMode::Exp, lanes_of(x, {16, 12}));
  EXPECT_LE(std::abs(r.out.value(5) - kExpAtMinusOne), kExpOutFormat.ulp());
  EXPECT_EQ(r.out.value(0), 1.0);
  EXPECT_EQ(r.clamped, 0u);
}

TEST(NlUnit, WrongLaneCount) {
  const NlUnit unit;
  EXPECT_THROW(unit.eval(NlMode::Exp, lanes_of(std::vector<double>(23, 0.0), {16, 10})), Error);
  EXPECT_NO_THROW(NlUnit(8).eval(NlMode::Exp, lanes_of(std::vector<double>(8, 0.0), {16, 10})));
  EXPECT_NO_THROW(unit.eval_tiled(NlMode::Exp, lanes_of(std::vector<double>(23, 0.0), {16, 10})));
}

TEST(NlUnit, ExpModeClampsPositiveLanes) {
  const NlUnit unit(4);
  const NlResult r = unit.eval(NlMode::Exp, lanes_of({0.5, -0.5, 1.0 / 1024, 0.0}, {16, 10}));
  EXPECT_EQ(r.clamped, 2u);
  EXPECT_EQ(r.out.value(0), 1.0);
  EXPECT_EQ(r.out.value(2), 1.0);
}

TEST(NlUnit, SoftPlusSymmetryWithinTwoUlp) {
  Rng rng(33);
  const NlUnit unit(2);
  const FixFormat in{16, 11};
  for (int i = 0; i < 1000000; ++i) {
    const double mag = rng.uniform(0.0, 7.9);
    const FixTensor lanes = lanes_of({mag, -mag}, in);
    const NlResult r = unit.eval(NlMode::SoftPlus, lanes);
    const double diff = r.out.value(0) - r.out.value(1) - lanes.value(0);
    ASSERT_LE(std::abs(diff), 2 * kSoftPlusOutFormat.ulp()) << mag;
  }
}

TEST(NlUnit, FixedAgreesWithRealPath) {
  const NlUnit unit(1);
  for (int frac : {8, 10, 12, 14}) {
    const FixFormat in{16, frac};
    for (std::int32_t code = -32768; code <= 32767; code += 3) {
      const FixTensor lane = make_fix({code}, in);
      const double x = lane.value(0);
      if (code <= 0) {
        const NlResult e = unit.eval(NlMode::Exp, lane);
        ASSERT_LE(std::abs(e.out.value(0) - exp_neg_approx(x)), 2 * kExpOutFormat.ulp()) << x;
      }
      if (x < 7.9) {
        const NlResult s = unit.eval(NlMode::SoftPlus, lane);
        ASSERT_LE(std::abs(s.out.value(0) - softplus_approx(x)), 2 * kSoftPlusOutFormat.ulp()) << x;
      }
    }
  }
}

TEST(NlUnit, LaneParallelEqualsSequential) {
  Rng rng(34);
  std::vector<double> x(24);
  for (double& v : x) v = rng.uniform(-6.0, 6.0);
  const FixTensor lanes = lanes_of(x, {16, 10});
  const NlResult all = NlUnit().eval(NlMode::SoftPlus, lanes);
  for (std::size_t i = 0; i < 24; ++i) {
    const NlResult one = NlUnit(1).eval(NlMode::SoftPlus, make_fix({lanes.codes[i]}, lanes.fmt));
    EXPECT_EQ(one.out.codes[0], all.out.codes[i]);
  }
}

TEST(NlUnit, DeepNegativeUnderflowsToZero) {
  const NlUnit unit(1);
  const NlResult r = unit.eval(NlMode::Exp, make_fix({-32768}, {16, 8}));  // x = -128
  EXPECT_EQ(r.out.codes[0], 0);
}

}  // namespace
}  // namespace fxm

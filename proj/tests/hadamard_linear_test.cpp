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

#include "fxmamba/hadamard_linear.hpp"
#include "fxmamba/random.hpp"
#include "support/oracles.hpp"

namespace fxm {
namespace {

constexpr double kGaussianRelTol = 0.02;  // numpy oracle worst case 0.0159

TEST(BuildHadamard, Examples) {
  EXPECT_EQ(build_hadamard(1).entries, std::vector<std::int8_t>{1});
  EXPECT_EQ(build_hadamard(2).entries, (std::vector<std::int8_t>{1, 1, 1, -1}));
  const HadamardMatrix h4 = build_hadamard(4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      int dot = 0;
      for (std::size_t k = 0; k < 4; ++k) dot += h4(i, k) * h4(j, k);
      EXPECT_EQ(dot, i == j ? 4 : 0);
    }
}

TEST(BuildHadamard, MatchesSylvesterParityFormula) {
  for (std::size_t n = 1; n <= 256; n *= 2) {
    const HadamardMatrix h = build_hadamard(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) ASSERT_EQ(h(i, j), oracle::hadamard_entry(i, j));
  }
}

TEST(BuildHadamard, RejectsNonPowerOfTwo) {
  for (std::size_t n : {0u, 3u, 6u, 12u, 100u}) {
    try {
      build_hadamard(n);
      FAIL() << n;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::group_rule);
      EXPECT_NE(std::string(e.what()).find("group dimension must be 2^k"), std::string::npos);
    }
  }
}

TEST(HadamardTransformGroups, Examples) {
  EXPECT_EQ(hadamard_transform_groups(MatrixD(1, 2, {1, 0}), 1).data(), (std::vector<double>{1, 1}));
  EXPECT_EQ(hadamard_transform_groups(MatrixD(1, 2, {1, 1}), 1).data(), (std::vector<double>{2, 0}));
  const double a = 1.5, b = -2.0, c = 0.25, d = 7.0;
  EXPECT_EQ(hadamard_transform_groups(MatrixD(1, 4, {a, b, c, d}), 2).data(),
            (std::vector<double>{a + b, a - b, c + d, c - d}));
}

TEST(HadamardTransformGroups, MatchesExplicitProduct) {
  Rng rng(7);
  for (std::size_t m : {1u, 2u, 4u, 8u}) {
    const MatrixD x = rng.normal_matrix(5, 64);
    const MatrixD fast = hadamard_transform_groups(x, m);
    const MatrixD slow = oracle::group_rotate(x, m);
    EXPECT_LT(oracle::rel_frobenius(fast, slow), 1e-14);
  }
}

TEST(HadamardTransformGroups, Errors) {
  EXPECT_THROW(hadamard_transform_groups(MatrixD(1, 6), 4), Error);  // 6 % 4 != 0
  EXPECT_THROW(hadamard_transform_groups(MatrixD(1, 12), 1), Error);  // 12 not 2^k
}

TEST(HadamardTransformGroups, IntegerInvolutionIsExact) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    MatrixD x(3, 128);
    for (double& v : x.data()) v = static_cast<double>(static_cast<int>(rng.index(2001)) - 1000);
    const MatrixD twice = hadamard_transform_groups(hadamard_transform_groups(x, 2), 2);
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(twice.data()[i] / 64.0, x.data()[i]);
  }
}

TEST(FindScale, Examples) {
  EXPECT_EQ(find_scale(std::vector<double>{1.0, -254.0}), 2.0);
  EXPECT_EQ(find_scale(std::vector<double>{127.0}), 1.0);
  EXPECT_EQ(find_scale(std::vector<double>(5, 0.0)), 1.0);
  EXPECT_THROW(find_scale(std::vector<double>{NAN}), Error);
}

TEST(QuantizeInt8, Examples) {
  EXPECT_EQ(quantize_int8(std::vector<double>{2.0}, 2.0)[0], 1);
  EXPECT_EQ(quantize_int8(std::vector<double>{300.0}, 1.0)[0], 127);
  EXPECT_EQ(quantize_int8(std::vector<double>{-1.5}, 1.0)[0], -2);
  EXPECT_EQ(quantize_int8(std::vector<double>{-300.0}, 1.0)[0], -128);
  EXPECT_THROW(quantize_int8(std::vector<double>{1.0}, 0.0), Error);
}

TEST(QuantizedLinear, HandTracedExample) {
  const MatrixD x(1, 2, {1, 0});
  const MatrixD w(1, 2, {1, 0});
  const QuantLinearLayer layer = make_quant_linear(w, 1);
  EXPECT_EQ(layer.wq.data(), (std::vector<std::int8_t>{127, 127}));
  const MatrixD y = quantized_linear(x, layer);
  EXPECT_EQ(y(0, 0), 1.0);
}

TEST(QuantizedLinear, ZeroWeights) {
  Rng rng(1);
  const QuantLinearLayer layer = make_quant_linear(MatrixD(8, 64), 1);
  EXPECT_EQ(layer.s_w, 1.0);
  const MatrixD y = quantized_linear(rng.normal_matrix(4, 64), layer);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(QuantizedLinear, GaussianFixturesWithinFrozenTolerance) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const MatrixD x = rng.normal_matrix(8, 64);
    const MatrixD w = rng.normal_matrix(32, 64);
    const MatrixD y = quantized_linear(x, make_quant_linear(w, 1));
    EXPECT_LE(oracle::rel_frobenius(y, oracle::matmul_nt(x, w)), kGaussianRelTol);
  }
}

TEST(QuantizedLinear, ShapeMismatch) {
  const QuantLinearLayer layer = make_quant_linear(MatrixD(4, 8), 2);
  EXPECT_THROW(quantized_linear(MatrixD(1, 16), layer), Error);
  EXPECT_THROW(make_quant_linear(MatrixD(4, 12), 2), Error);
}

TEST(QuantizedLinear, RowParallelIsBitIdentical) {
  Rng rng(13);
  const MatrixD x = rng.normal_matrix(33, 128);
  const QuantLinearLayer layer = make_quant_linear(rng.normal_matrix(48, 128), 2);
  const MatrixD serial = quantized_linear(x, layer, ActScaling::dynamic, 1);
  for (unsigned threads : {2u, 3u, 8u}) EXPECT_EQ(quantized_linear(x, layer, ActScaling::dynamic, threads), serial);
}

TEST(QuantizedLinear, CalibratedScaleOnItsCalibrationBatch) {
  Rng rng(14);
  const MatrixD x = rng.normal_matrix(6, 64);
  const MatrixD w = rng.normal_matrix(16, 64);
  QuantLinearLayer layer = make_quant_linear(w, 1);
  EXPECT_THROW(quantized_linear(x, layer, ActScaling::calibrated), Error);
  calibrate_activation(layer, x);
  const auto cal = quantized_linear_ex(x, layer, ActScaling::calibrated);
  EXPECT_EQ(cal.saturated, 0u);
  EXPECT_LE(oracle::rel_frobenius(cal.y, oracle::matmul_nt(x, w)), kGaussianRelTol);
  EXPECT_NEAR(cal.act_scale, find_scale(hadamard_transform_groups(x, 1).data()),
              cal.act_scale * std::ldexp(1.0, -14));
}

TEST(RequantParams, Examples) {
  const RequantParams one = requant_params(1.0);
  EXPECT_EQ(one.coe, 16384);
  EXPECT_EQ(one.shift, 14);
  const RequantParams half = requant_params(0.5);
  EXPECT_EQ(half.coe, 16384);
  EXPECT_EQ(half.shift, 13);
  EXPECT_THROW(requant_params(0.0), Error);
  EXPECT_THROW(requant_params(-1.0), Error);
}

TEST(RequantParams, MantissaWindowAndErrorSweep) {
  Rng rng(15);
  double worst = 0.0;
  for (int trial = 0; trial < 1000000; ++trial) {
    const double s = std::ldexp(rng.uniform(1.0, 2.0), static_cast<int>(rng.index(40)) - 20);
    const auto v = static_cast<std::int64_t>(rng.index(2000001)) - 1000000;
    const RequantParams p = requant_params(s);
    ASSERT_GE(p.coe, 1 << 14);
    ASSERT_LT(p.coe, 1 << 15);
    if (v == 0) continue;
    const double exact = static_cast<double>(v) / s;
    worst = std::max(worst, std::abs(p.real(static_cast<double>(v)) - exact) / std::abs(exact));
    // Integer application adds at most half a unit of rounding.
    ASSERT_LE(std::abs(static_cast<double>(p.apply(v)) - exact), 0.5 + std::abs(exact) * std::ldexp(1.0, -14) + 1e-9);
  }
  EXPECT_LE(worst, std::ldexp(1.0, -13));
  EXPECT_LE(worst, std::ldexp(1.0, -14));
}

TEST(OutlierProperties, FlatteningAndAccuracyOrdering) {
  Rng rng(16);
  int wins = 0;
  const int trials = 200;
  for (int trial = 0; trial < trials; ++trial) {
    MatrixD x = rng.normal_matrix(16, 64);
    for (int k = 0; k < 10; ++k) x.data()[rng.index(x.size())] *= 100.0;
    const MatrixD w = rng.normal_matrix(64, 64);
    const MatrixD xh = hadamard_transform_groups(x, 1);
    auto crest = [](const MatrixD& m) {
      double peak = 0.0, ss = 0.0;
      for (double v : m.data()) {
        peak = std::max(peak, std::abs(v));
        ss += v * v;
      }
      return peak / std::sqrt(ss / static_cast<double>(m.size()));
    };
    EXPECT_LT(crest(xh), crest(x));
    const MatrixD exact = oracle::matmul_nt(x, w);
    const double eh = oracle::rel_frobenius(quantized_linear(x, make_quant_linear(w, 1)), exact);
    const double ep = oracle::rel_frobenius(plain_w8a8_linear(x, w), exact);
    wins += eh < ep;
  }
  EXPECT_GE(wins, trials * 95 / 100);
}

// ---------------------------------------------------------------------------
// Hardware datapath

TEST(HwQuantizedLinear, ZeroInputGivesZeroOutput) {
  Rng rng(17);
  const QuantLinearLayer layer = make_quant_linear(rng.normal_matrix(8, 16), 2);
  FixTensor x;
  x.shape = {3, 16};
  x.fmt = {16, 10};
  x.codes.assign(48, 0);
  const HwLinearResult r = hw_quantized_linear(x, layer, {16, 8});
  for (std::int32_t c : r.y.codes) EXPECT_EQ(c, 0);
}

TEST(HwQuantizedLinear, IdentityWeightsRotateThenUnrotate) {
  MatrixD eye(4, 4);
  for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0;
  const QuantLinearLayer layer = make_quant_linear(eye, 1);
  const FixFormat in{16, 10};
  const FixTensor x = quantize_pot(MatrixD(1, 4, {1.0, 0.0, 0.0, 0.0}), in);
  const HwLinearResult r = hw_quantized_linear(x, layer, in);
  EXPECT_EQ(r.y.codes, (std::vector<std::int32_t>{1024, 0, 0, 0}));

  // Random inputs: compare with quantize(x H) H^T / 4 computed independently.
  Rng rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    const MatrixD xr = rng.normal_matrix(1, 4);
    const FixTensor xf = quantize_pot(xr, in);
    const HwLinearResult hr = hw_quantized_linear(xf, layer, in);
    const MatrixD xd(1, 4, dequantize(xf));
    const MatrixD xh = oracle::group_rotate(xd, 1);
    std::vector<double> q(4);
    for (std::size_t j = 0; j < 4; ++j) q[j] = std::nearbyint(xh.data()[j] / hr.act_scale);
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = 0.0;
      for (std::size_t j = 0; j < 4; ++j) acc += q[j] * layer.wq(o, j);
      const double expect = acc * hr.act_scale * layer.s_w / 4.0;
      EXPECT_LE(std::abs(hr.y.value(o) - expect), in.ulp()) << trial;
    }
  }
}

TEST(HwQuantizedLinear, MatchesFloatPathWithinOneUlp) {
  Rng rng(19);
  const FixFormat in{16, 11};
  const FixFormat out{16, 9};
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = std::size_t{1} << rng.index(3);
    const MatrixD xr = rng.normal_matrix(4, 64, 2.0);
    const QuantLinearLayer layer = make_quant_linear(rng.normal_matrix(24, 64, 0.3), m);
    const FixTensor x = quantize_pot(xr, in);
    ASSERT_EQ(x.saturated, 0u);
    const HwLinearResult hw = hw_quantized_linear(x, layer, out);
    ASSERT_EQ(hw.y.saturated, 0u);
    const MatrixD ref = quantized_linear_scaled(MatrixD(4, 64, dequantize(x)), layer, hw.act_scale).y;
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_LE(std::abs(hw.y.value(i) - ref.data()[i]), out.ulp()) << trial;
  }
}

TEST(HwQuantizedLinear, ShapeErrors) {
  const QuantLinearLayer layer = make_quant_linear(MatrixD(4, 8), 1);
  FixTensor x = make_fix(std::vector<std::int32_t>(8), {16, 0});
  EXPECT_THROW(hw_quantized_linear(x, layer, {16, 0}), Error);  // 1-D shape
  x.shape = {2, 4};
  EXPECT_THROW(hw_quantized_linear(x, layer, {16, 0}), Error);
}

}  // namespace
}  // namespace fxm

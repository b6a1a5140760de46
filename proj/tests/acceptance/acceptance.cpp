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
// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#include "fxmamba/hadamard_linear.hpp"
#include "fxmamba/mamba_model.hpp"
#include "fxmamba/nonlin_approx.hpp"
#include "fxmamba/perf_model.hpp"
#include "fxmamba/ssm_block.hpp"
#include "fxmamba/synthetic.hpp"
#include "support/cli_runner.hpp"
#include "support/oracles.hpp"
#include "support/ssm_fixture.hpp"

namespace {

using namespace fxm;
using testing::make_ssm_fixture;
using testing::rel_l2;

// Frozen values; see the unit suites for where each comes from.
constexpr double kLinearRelTol = 0.02;
constexpr double kExpCeiling = 6e-3;
constexpr double kExpFrozen = 1.73e-3;
constexpr double kSsmOracleTol = 1e-12;
constexpr double kSsmQuantTol = 5e-3;
constexpr double kBlockCosine = 0.995;

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Outcome hadamard_identity() {
  Rng rng(101);
  std::size_t matrices = 0;
  for (std::size_t n = 1; n <= 256; n *= 2) {
    const HadamardMatrix h = build_hadamard(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        long dot = 0;
        for (std::size_t k = 0; k < n; ++k) dot += h(i, k) * h(j, k);
        if (dot != (i == j ? static_cast<long>(n) : 0)) return {false, "H H^T != nI at n=" + std::to_string(n)};
      }
    for (int t = 0; t < 100; ++t, ++matrices) {
      // Integer entries keep every sum exact in double.
      MatrixD x(1 + rng.index(8), n);
      for (double& v : x.data()) v = static_cast<double>(static_cast<int>(rng.index(2001)) - 1000);
      const MatrixD xh = hadamard_transform_groups(x, 1);
      const MatrixD twice = hadamard_transform_groups(xh, 1);
      double ex = 0.0, eh = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (twice.data()[i] != static_cast<double>(n) * x.data()[i]) return {false, "involution failed"};
        ex += x.data()[i] * x.data()[i];
        eh += xh.data()[i] * xh.data()[i];
      }
      if (eh != static_cast<double>(n) * ex) return {false, "energy invariant failed"};
    }
  }
  return {true, std::to_string(matrices) + " matrices, n = 1..256"};
}

Outcome quantized_linear_fidelity() {
  const MatrixD y = quantized_linear(MatrixD(1, 2, {1, 0}), make_quant_linear(MatrixD(1, 2, {1, 0}), 1));
  if (y(0, 0) != 1.0) return {false, fmt("hand-traced example gave %.17g", y(0, 0))};
  Rng rng(102);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const MatrixD x = rng.normal_matrix(16, 256);
    const MatrixD w = rng.normal_matrix(256, 256);
    worst = std::max(worst, oracle::rel_frobenius(quantized_linear(x, make_quant_linear(w, 4)), oracle::matmul_nt(x, w)));
  }
  return {worst <= kLinearRelTol, fmt("worst rel error %.4g <= %.3g over 1000 fixtures, hand example exact", worst, kLinearRelTol)};
}

Outcome outlier_ordering() {
  Rng rng(103);
  int wins = 0;
  for (int t = 0; t < 1000; ++t) {
    MatrixD x = rng.normal_matrix(16, 64);
    const std::size_t n_out = x.size() / 100;
    for (std::size_t k = 0; k < n_out; ++k) x.data()[rng.index(x.size())] *= 100.0;
    const MatrixD w = rng.normal_matrix(64, 64);
    const MatrixD exact = oracle::matmul_nt(x, w);
    const double eh = oracle::rel_frobenius(quantized_linear(x, make_quant_linear(w, 1)), exact);
    const double ep = oracle::rel_frobenius(plain_w8a8_linear(x, w), exact);
    wins += eh < ep;
  }
  return {wins >= 950, std::to_string(wins) + "/1000 trials rotated < plain"};
}

Outcome exp_approximation() {
  double worst = 0.0, prev = 0.0;
  for (int i = 160000; i >= 0; --i) {
    const double x = -i * 1e-4;
    const double e = exp_neg_approx(x);
    if (e < prev) return {false, fmt("not monotone at x = %.4f", x)};
    prev = e;
    worst = std::max(worst, std::abs(e - std::exp(x)));
  }
  return {worst <= kExpCeiling && worst <= kExpFrozen,
          fmt("max error %.5g (frozen %.3g, ceiling %.0e), monotone", worst, kExpFrozen, kExpCeiling)};
}

Outcome softplus_symmetry() {
  Rng rng(104);
  std::size_t real_bad = 0;
  for (int i = 0; i < 1000000; ++i) {
    double x = 0.0;
    if (i % 2 == 0) {
      const auto code = static_cast<std::int64_t>(rng.index(65535)) - 32767;
      x = std::ldexp(static_cast<double>(code), -static_cast<int>(rng.index(15)));
    } else {
      x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.6, 64.0);
    }
    real_bad += softplus_approx(x) - softplus_approx(-x) - x != 0.0;
  }
  const NlUnit unit(2);
  const FixFormat in{16, 11};
  double worst_ulp = 0.0;
  for (int i = 0; i < 1000000; ++i) {
    const double mag = rng.uniform(0.0, 7.9);
    const FixTensor lanes = quantize_pot(std::vector<double>{mag, -mag}, in);
    const NlResult r = unit.eval(NlMode::SoftPlus, lanes);
    const double diff = r.out.value(0) - r.out.value(1) - lanes.value(0);
    worst_ulp = std::max(worst_ulp, std::abs(diff) / kSoftPlusOutFormat.ulp());
  }
  return {real_bad == 0 && worst_ulp <= 2.0,
          fmt("real path %.0f nonzero of 1e6, 16-bit path worst %.2g ulp of 1e6", static_cast<double>(real_bad), worst_ulp)};
}

Outcome ssm_equivalence() {
  Rng rng(105);
  double worst_ref = 0.0, worst_q = 0.0;
  std::size_t events = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t heads = 1 + rng.index(4);
    const SsmDims dims{heads, 1 + rng.index(16), 1 + rng.index(16), rng.index(2) ? heads : 1};
    const auto f = make_ssm_fixture(rng, 1 + rng.index(32), dims);
    worst_ref = std::max(worst_ref, rel_l2(ssm_prefill(f.seq, f.params, f.dims).y.data(),
                                           oracle::ssm_unrolled(testing::to_oracle(f))));
    const QuantSsm q = quantize_ssm(f.params, f.dims, ssm_quant_calibrate(f.seq, f.params, f.dims));
    const QuantSsmRun run = ssm_prefill_quant(f.seq, q);
    events += run.counters.saturated + run.counters.clamped;
    worst_q = std::max(worst_q, rel_l2(run.y.data(), ssm_prefill(f.seq, f.params, f.dims, Nonlinearity::approx).y.data()));
  }
  return {worst_ref <= kSsmOracleTol && worst_q <= kSsmQuantTol && events == 0,
          fmt("reference %.3g <= 1e-12, quantized %.3g <= 5e-3, saturation events %.0f", worst_ref, worst_q,
              static_cast<double>(events))};
}

ModelConfig block_config(std::size_t heads, std::size_t head_dim) {
  ModelConfig c;
  c.d_model = 64;
  c.n_heads = heads;
  c.head_dim = head_dim;
  c.d_state = 16;
  c.final_norm = false;
  return c;
}

Outcome streaming_equivalence() {
  double worst_q_ulp = 0.0;
  for (std::size_t L : {1u, 7u, 63u}) {
    const ModelConfig c = block_config(8, 16);
    const FloatModel fm = random_float_model(c, 10 + L);
    const ModelInput in = random_input(c, L + 1, 20 + L);
    const QuantModel qm = quantize_model(fm, in);
    bool ref_exact = true;
    auto check = [&](const auto& block, bool quant) {
      BlockCache full_cache = zero_block_cache(c), cache = zero_block_cache(c);
      const MatrixD full = block_forward(in.hidden, block, c, full_cache);
      block_forward(slice_rows(in.hidden, 0, L), block, c, cache);
      const MatrixD last = block_forward(slice_rows(in.hidden, L, 1), block, c, cache, ForwardMode::decode);
      for (std::size_t i = 0; i < c.d_model; ++i) {
        const double d = std::abs(last(0, i) - full(L, i));
        if (quant) {
          // Output ulp of the residual stream value, in double.
          worst_q_ulp = std::max(worst_q_ulp, d / std::max(std::abs(full(L, i)) * 0x1p-52, 0x1p-1074));
        } else if (d != 0.0) {
          ref_exact = false;
        }
      }
    };
    check(fm.layers[0], false);
    check(qm.layers[0], true);
    if (!ref_exact) return {false, "reference path differs at L = " + std::to_string(L)};
  }
  return {worst_q_ulp <= 1.0, fmt("L = 1, 7, 63: reference bit-exact, quantized worst %.3g ulp", worst_q_ulp)};
}

Outcome block_cosine() {
  double worst = 1.0;
  std::size_t events = 0, configs = 0;
  for (auto [heads, dim] : {std::pair<std::size_t, std::size_t>{8, 16}, {2, 64}}) {
    for (std::uint64_t seed = 200; seed < 250; ++seed, ++configs) {
      const ModelConfig c = block_config(heads, dim);
      const FloatModel fm = random_float_model(c, seed);
      const ModelInput in = random_input(c, 8, seed + 1000);
      const QuantModel qm = quantize_model(fm, in);
      const auto r = model_prefill(fm, in);
      const auto q = model_prefill(qm, in);
      events += q.output.stats.total();
      std::vector<double> dr, dq;
      for (std::size_t i = 0; i < in.hidden.size(); ++i) {
        dr.push_back(r.output.out.data()[i] - in.hidden.data()[i]);
        dq.push_back(q.output.out.data()[i] - in.hidden.data()[i]);
      }
      worst = std::min(worst, oracle::cosine(dq, dr));
    }
  }
  return {worst >= kBlockCosine && events == 0,
          fmt("worst cosine %.5f >= %.3f over %.0f configs", worst, kBlockCosine, static_cast<double>(configs))};
}

Outcome perf_properties() {
  const ModelConfig c = mamba2_2p7b_config();
  const CycleReport d1 = estimate_decode(c, {}, std::nullopt, 1);
  for (std::uint64_t ctx : {256u, 8192u, 1000000u})
    if (estimate_decode(c, {}, std::nullopt, ctx).total != d1.total) return {false, "decode depends on context"};
  for (std::uint64_t L = 1; L <= 8192; L *= 2) {
    const CycleReport a = estimate_prefill(L, c), b = estimate_prefill(2 * L, c);
    if (b.ssm != 2 * a.ssm) return {false, "prefill SSM cycles not linear in L"};
    if (a.linear + a.conv + a.ssm + a.norm_silu + a.other != a.total) return {false, "breakdown does not sum"};
  }
  const CycleReport s256 = estimate_prefill(256, c), s8192 = estimate_prefill(8192, c);
  const double sh256 = s256.share(s256.ssm), sh8192 = s8192.share(s8192.ssm);
  const bool ok = sh8192 > sh256 && d1.tokens_per_s >= 2.8 && d1.tokens_per_s <= 11.4;
  return {ok, fmt("2.7B decode %.3f tokens/s in [2.8, 11.4], SSM share %.3f -> %.3f", d1.tokens_per_s, sh256, sh8192)};
}

Outcome cli_determinism() {
  namespace fs = std::filesystem;
  const fs::path base = fs::temp_directory_path() / ("fxmamba_accept_" + std::to_string(getpid()));
  const auto a = cli::produce_artifacts(FXMAMBA_CLI_PATH, FXMAMBA_TEST_DATA_DIR, base / "a", 1);
  const auto b = cli::produce_artifacts(FXMAMBA_CLI_PATH, FXMAMBA_TEST_DATA_DIR, base / "b", 1);
  const auto c = cli::produce_artifacts(FXMAMBA_CLI_PATH, FXMAMBA_TEST_DATA_DIR, base / "c", 4);
  fs::remove_all(base);
  for (const auto* r : {&a, &b, &c})
    if (!r->failures.empty()) return {false, r->failures.front()};
  for (const auto& [name, bytes] : a.artifacts) {
    if (bytes.empty()) return {false, name + " is empty"};
    if (b.artifacts.at(name) != bytes) return {false, name + " differs between runs"};
    if (c.artifacts.at(name) != bytes) return {false, name + " differs between 1 and 4 threads"};
  }
  return {true, std::to_string(a.artifacts.size()) + " artifacts identical over 3 runs (1, 1, 4 threads)"};
}

struct Criterion {
  const char* name;
  double budget_s;  // 0: no runtime limit
  std::function<Outcome()> check;
};

}  // namespace

int main() {
  const Criterion criteria[] = {
      {"hadamard-identity", 5.0, hadamard_identity},
      {"quantized-linear-fidelity", 60.0, quantized_linear_fidelity},
      {"outlier-robustness-ordering", 0.0, outlier_ordering},
      {"exponential-approximation", 10.0, exp_approximation},
      {"softplus-symmetry", 0.0, softplus_symmetry},
      {"ssm-oracle-equivalence", 0.0, ssm_equivalence},
      {"streaming-equivalence", 0.0, streaming_equivalence},
      {"quantized-block-cosine", 0.0, block_cosine},
      {"perf-model-properties", 0.0, perf_properties},
      {"cli-determinism", 0.0, cli_determinism},
  };
  int failed = 0, idx = 0;
  for (const Criterion& c : criteria) {
    ++idx;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0.0 && secs > c.budget_s) {
      o.pass = false;
      o.detail += fmt("; over runtime budget %.0f s", c.budget_s);
    }
    failed += !o.pass;
    std::printf("%s %2d %-28s %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", idx, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", idx - failed, idx);
  return failed == 0 ? 0 : 1;
}

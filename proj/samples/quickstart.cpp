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
// Builds a small random model, quantizes it, runs prefill and a few greedy
// decode steps on both paths, and prints the cycle estimate for its shape.

#include <algorithm>
#include <cstdio>

#include "fxmamba/error_report.hpp"
#include "fxmamba/perf_model.hpp"
#include "fxmamba/synthetic.hpp"

int main() {
  using namespace fxm;
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.vocab_size = 512;

  const FloatModel fm = random_float_model(cfg, 1);
  const ModelInput prompt = random_input(cfg, 16, 2);
  const QuantModel qm = quantize_model(fm, prompt);

  const ErrorReport rep = error_report(fm, qm, prompt);
  std::printf("prefill logits: rel_l2 %.3e  cosine %.6f\n", rep.end_to_end.rel_l2, rep.end_to_end.cosine);

  PrefillResult ref = model_prefill(fm, prompt);
  PrefillResult q = model_prefill(qm, prompt);
  auto argmax_last = [](const MatrixD& m) {
    const auto row = m.row(m.rows() - 1);
    return static_cast<std::int64_t>(std::max_element(row.begin(), row.end()) - row.begin());
  };
  std::int64_t tr = argmax_last(ref.output.out), tq = argmax_last(q.output.out);
  std::printf("greedy ref:  ");
  for (int s = 0; s < 8; ++s) {
    std::printf(" %lld", static_cast<long long>(tr));
    tr = argmax_last(model_decode_step(fm, ModelInput::from_tokens({tr}), ref.caches).out);
  }
  std::printf("\ngreedy quant:");
  RunStats stats;
  for (int s = 0; s < 8; ++s) {
    std::printf(" %lld", static_cast<long long>(tq));
    const ModelOutput o = model_decode_step(qm, ModelInput::from_tokens({tq}), q.caches);
    stats += o.stats;
    tq = argmax_last(o.out);
  }
  std::printf("\nsaturation events while decoding: %zu\n", stats.total());

  const CycleReport perf = estimate_decode(cfg);
  std::printf("estimated decode: %llu cycles/token, %.0f tokens/s at 250 MHz\n",
              static_cast<unsigned long long>(perf.total), perf.tokens_per_s);
  return 0;
}

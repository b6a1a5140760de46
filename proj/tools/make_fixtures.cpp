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
// Writes the small synthetic fixtures used by the CLI tests and the
// acceptance suite. Output is a pure function of the seeds below.

#include <filesystem>
#include <iostream>

#include "fxmamba/model_io.hpp"
#include "fxmamba/synthetic.hpp"

int main(int argc, char** argv) {
  using namespace fxm;
  if (argc != 2) {
    std::cerr << "usage: fxmamba_make_fixtures <out-dir>\n";
    return 1;
  }
  const std::filesystem::path dir = argv[1];
  std::filesystem::create_directories(dir);
  try {
    ModelConfig tiny;
    tiny.n_layers = 2;
    tiny.d_model = 64;
    tiny.n_heads = 2;
    tiny.head_dim = 64;
    tiny.d_state = 16;
    tiny.vocab_size = 256;
    save_model_config(tiny, dir / "tiny.json");
    save_fmw(float_model_to_fmw(random_float_model(tiny, 2026)), dir / "tiny.fmw");
    save_fmw(input_to_fmw(random_input(tiny, 12, 7), tiny), dir / "prompt.fmw");
    save_fmw(input_to_fmw(random_input(tiny, 4, 8), tiny), dir / "next.fmw");
    save_fmw(input_to_fmw(random_input(tiny, 32, 9), tiny), dir / "calib.fmw");

    // Hidden-state model whose norm weights blow up 1% of the channels.
    ModelConfig outl = tiny;
    outl.n_layers = 1;
    outl.vocab_size = 0;
    save_model_config(outl, dir / "outlier.json");
    save_fmw(float_model_to_fmw(random_float_model(outl, 2027, {0.01, 100.0})), dir / "outlier.fmw");
    save_fmw(input_to_fmw(random_input(outl, 16, 10), outl), dir / "outlier_input.fmw");

    // Group width 48 violates the power-of-two rule.
    ModelConfig bad = outl;
    bad.d_model = 96;
    bad.n_heads = 3;
    bad.hadamard_group = 48;
    save_model_config(bad, dir / "bad_group.json");
    save_fmw(float_model_to_fmw(random_float_model(bad, 2028)), dir / "bad_group.fmw");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

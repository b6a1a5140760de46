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

// Runs the fxmamba executable on the checked-in fixtures.

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fxmamba/fmw.hpp"

namespace fxm::cli {

namespace fs = std::filesystem;

struct CliResult {
  int code = -1;
  std::string out;  // stdout only; stderr goes to `err_file`
};

inline std::string quote(const std::string& s) { return "'" + s + "'"; }

inline CliResult run_cli(const std::string& exe, const std::vector<std::string>& args,
                         const fs::path& err_file = "/dev/null") {
  std::string cmd = quote(exe);
  for (const std::string& a : args) cmd += " " + quote(a);
  cmd += " 2>" + quote(err_file.string());
  CliResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

inline std::string read_text(const fs::path& p) {
  const auto b = read_file_bytes(p);
  return std::string(b.begin(), b.end());
}

// Every artifact the golden suite checks, keyed by file name. Files come from
// the CLI's --out arguments; *.txt/*.csv/*.json entries are captured stdout.
using Artifacts = std::map<std::string, std::string>;

struct ProduceResult {
  Artifacts artifacts;
  std::vector<std::string> failures;  // commands that exited nonzero
};

inline ProduceResult produce_artifacts(const std::string& exe, const fs::path& data, const fs::path& out,
                                       unsigned threads) {
  fs::create_directories(out);
  const std::string d = data.string() + "/", o = out.string() + "/", t = std::to_string(threads);
  ProduceResult res;
  auto step = [&](const std::string& capture, std::vector<std::string> args) {
    const CliResult r = run_cli(exe, args);
    if (r.code != 0) {
      std::string c;
      for (const auto& a : args) c += a + " ";
      res.failures.push_back("exit " + std::to_string(r.code) + ": " + c);
    }
    if (!capture.empty()) res.artifacts[capture] = r.out;
  };
  step("quantize.txt", {"quantize", "--in", d + "tiny.fmw", "--config", d + "tiny.json", "--calib", d + "calib.fmw",
                        "--out", o + "tiny_q.fmw", "--threads", t});
  step("quantize_synth.txt",
       {"quantize", "--in", d + "tiny.fmw", "--config", d + "tiny.json", "--out", o + "tiny_q_synth.fmw", "--threads", t});
  step("outlier_quantize.txt", {"quantize", "--in", d + "outlier.fmw", "--config", d + "outlier.json", "--calib",
                                d + "outlier_input.fmw", "--out", o + "outlier_q.fmw", "--threads", t});
  for (const std::string path : {"quant", "ref"}) {
    const std::string w = path == "quant" ? o + "tiny_q.fmw" : d + "tiny.fmw";
    step("run_prefill_" + path + ".txt",
         {"run", "--weights", w, "--config", d + "tiny.json", "--mode", "prefill", "--input", d + "prompt.fmw", "--out",
          o + "prefill_" + path + ".fmw", "--state-out", o + "state_" + path + ".fmw", "--path", path, "--threads", t});
    step("run_decode_" + path + ".txt",
         {"run", "--weights", w, "--config", d + "tiny.json", "--mode", "decode", "--input", d + "next.fmw", "--out",
          o + "decode_" + path + ".fmw", "--state-in", o + "state_" + path + ".fmw", "--state-out",
          o + "state2_" + path + ".fmw", "--steps", "3", "--path", path, "--threads", t});
  }
  step("error_report.json", {"error-report", "--weights-f", d + "tiny.fmw", "--weights-q", o + "tiny_q.fmw", "--config",
                             d + "tiny.json", "--input", d + "prompt.fmw", "--json", "--threads", t});
  step("error_report.txt", {"error-report", "--weights-f", d + "tiny.fmw", "--weights-q", o + "tiny_q.fmw", "--config",
                            d + "tiny.json", "--input", d + "prompt.fmw", "--threads", t});
  step("outlier_report.json", {"error-report", "--weights-f", d + "outlier.fmw", "--weights-q", o + "outlier_q.fmw",
                               "--config", d + "outlier.json", "--input", d + "outlier_input.fmw", "--json", "--threads", t});
  step("identical_report.json", {"error-report", "--weights-f", d + "tiny.fmw", "--weights-q", d + "tiny.fmw", "--config",
                                 d + "tiny.json", "--input", d + "prompt.fmw", "--json", "--threads", t});
  step("pwl.csv", {"dump-pwl"});
  step("perf.txt", {"perf"});
  step("perf_decode.json", {"perf", "--json", "--watts", "9.3"});
  step("perf_prefill.json", {"perf", "--mode", "prefill", "--tokens", "8192", "--json"});
  step("perf_tiny.json", {"perf", "--config", d + "tiny.json", "--mode", "prefill", "--tokens", "12", "--json"});

  for (const char* f : {"tiny_q.fmw", "tiny_q_synth.fmw", "outlier_q.fmw", "prefill_quant.fmw", "state_quant.fmw",
                        "decode_quant.fmw", "state2_quant.fmw", "prefill_ref.fmw", "state_ref.fmw", "decode_ref.fmw",
                        "state2_ref.fmw"}) {
    res.artifacts[f] = fs::exists(out / f) ? read_text(out / f) : std::string();
  }
  return res;
}

}  // namespace fxm::cli

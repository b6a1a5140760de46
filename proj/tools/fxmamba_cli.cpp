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
// fxmamba: command-line driver.
//
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "fxmamba/error_report.hpp"
#include "fxmamba/model_io.hpp"
#include "fxmamba/nonlin_approx.hpp"
#include "fxmamba/perf_model.hpp"
#include "fxmamba/synthetic.hpp"

namespace {

using namespace fxm;

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(Errc::invalid_argument, path + ": " + e.what());
  }
}

std::string frac_str(const FixFormat& f) { return fmt("Q%d.%d", f.width - f.frac, f.frac); }

void print_linear(const char* name, const QuantLinearLayer& l) {
  std::cout << fmt("  %-9s groups %-3zu s_w %.6e  s_x %.6e (coe %lld >> %d)\n", name, l.m, l.s_w,
                   1.0 / l.act.factor(), static_cast<long long>(l.act.coe), l.act.shift);
}

void print_scale_summary(const QuantModel& q) {
  for (std::size_t i = 0; i < q.layers.size(); ++i) {
    const QuantBlock& b = q.layers[i];
    std::cout << "layer " << i << '\n';
    print_linear("in_proj", b.in_proj);
    std::cout << fmt("  %-9s in %s  out %s\n", "conv", frac_str(b.conv.in).c_str(), frac_str(b.conv.out).c_str());
    const SsmFormats& f = b.ssm.fmt;
    std::cout << fmt("  %-9s x %s  B %s  C %s  dt %s  Q %s  H %s  Y %s\n", "ssm", frac_str(f.x).c_str(),
                     frac_str(f.B).c_str(), frac_str(f.C).c_str(), frac_str(f.dt_sum).c_str(), frac_str(f.Q).c_str(),
                     frac_str(f.H).c_str(), frac_str(f.Y).c_str());
    print_linear("out_proj", b.out_proj);
  }
}

void print_stats(const RunStats& s) {
  std::cout << "saturation linear " << s.linear_saturated << " conv " << s.conv_saturated << " ssm " << s.ssm_saturated
            << " ssm_clamped " << s.ssm_clamped << '\n';
}

// ---------------------------------------------------------------------------

struct QuantizeArgs {
  std::string in, config, calib, out;
  std::size_t calib_length = 64;
  unsigned threads = 1;
};

int cmd_quantize(const QuantizeArgs& a) {
  const ModelConfig cfg = load_model_config(a.config);
  const FmwFile in = load_fmw(a.in);
  require(!is_quantized(in), Errc::already_quantized, "already quantized: " + a.in);
  const FloatModel fm = float_model_from_fmw(in, cfg);
  // Without --calib the calibration sample is a fixed synthetic sequence.
  const ModelInput calib =
      a.calib.empty() ? random_input(cfg, a.calib_length, 0) : input_from_fmw(load_fmw(a.calib), cfg);
  const QuantModel qm = quantize_model(fm, calib, {a.threads});
  const FmwFile out = quant_model_to_fmw(qm);
  const std::vector<std::uint8_t> bytes = encode_fmw(out);
  write_file_bytes(a.out, bytes);
  print_scale_summary(qm);
  std::cout << fmt("wrote %s: %zu tensors, %zu bytes, crc32 %08x\n",
                   std::filesystem::path(a.out).filename().string().c_str(), out.size(), bytes.size(),
                   crc32_of(std::span(bytes).first(bytes.size() - 4)));
  return 0;
}

// ---------------------------------------------------------------------------

struct RunArgs {
  std::string weights, config, mode = "prefill", input, out, path, state_in, state_out;
  std::size_t steps = 0;
  unsigned threads = 1;
};

std::int64_t argmax_row(const MatrixD& m, std::size_t r) {
  const auto row = m.row(r);
  return static_cast<std::int64_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

MatrixD stack_rows(const MatrixD& a, const MatrixD& b) {
  if (a.rows() == 0) return b;
  std::vector<double> d(a.data().begin(), a.data().end());
  d.insert(d.end(), b.data().begin(), b.data().end());
  return MatrixD(a.rows() + b.rows(), a.cols(), std::move(d));
}

ModelInput slice_input(const ModelInput& in, const ModelConfig& c, std::size_t r) {
  if (c.vocab_size > 0) return ModelInput::from_tokens({in.tokens[r]});
  const auto row = in.hidden.row(r);
  return ModelInput::from_hidden(MatrixD(1, in.hidden.cols(), std::vector<double>(row.begin(), row.end())));
}

template <typename Block>
int run_model(const Model<Block>& m, const QuantModel* qm, const RunArgs& a) {
  constexpr bool quant = std::is_same_v<Block, QuantBlock>;
  const ModelConfig& c = m.cfg;
  const ModelInput in = input_from_fmw(load_fmw(a.input), c);
  require(in.length(c) > 0, Errc::invalid_argument, "input has no positions");
  require(a.steps == 0 || c.vocab_size > 0, Errc::invalid_argument, "--steps needs a model with vocab_size > 0");
  ModelCaches caches = a.state_in.empty() ? zero_caches(c) : caches_from_fmw(load_fmw(a.state_in), c, quant, qm);
  const RunOptions opt{a.threads};

  const auto t0 = std::chrono::steady_clock::now();
  MatrixD out;
  RunStats stats;
  if (a.mode == "prefill") {
    ModelOutput o = model_forward(m, in, caches, ForwardMode::prefill, opt);
    out = std::move(o.out);
    stats += o.stats;
  } else {
    for (std::size_t r = 0; r < in.length(c); ++r) {
      ModelOutput o = model_decode_step(m, slice_input(in, c, r), caches, opt);
      out = stack_rows(out, o.out);
      stats += o.stats;
    }
  }
  std::vector<double> generated;
  for (std::size_t s = 0; s < a.steps; ++s) {
    const std::int64_t next = argmax_row(out, out.rows() - 1);
    generated.push_back(static_cast<double>(next));
    ModelOutput o = model_decode_step(m, ModelInput::from_tokens({next}), caches, opt);
    out = stack_rows(out, o.out);
    stats += o.stats;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  FmwFile f;
  f.add(make_f32("out", {out.rows(), out.cols()}, out.data()));
  if (a.steps > 0) f.add(make_f32("generated", {generated.size()}, generated));
  save_fmw(f, a.out);
  if (!a.state_out.empty()) save_fmw(caches_to_fmw(caches, c, quant, qm), a.state_out);

  std::cout << "path " << (quant ? "quant" : "ref") << ", mode " << a.mode << ", positions " << out.rows();
  if (a.steps > 0) std::cout << " (" << a.steps << " generated)";
  std::cout << '\n';
  if (a.steps > 0) {
    std::cout << "generated";
    for (double t : generated) std::cout << ' ' << static_cast<std::int64_t>(t);
    std::cout << '\n';
  }
  print_stats(stats);
  // Timing varies run to run, so it stays off stdout.
  std::cerr << fmt("elapsed %.6f s, %.2f tokens/s\n", secs, secs > 0.0 ? static_cast<double>(out.rows()) / secs : 0.0);
  return 0;
}

int cmd_run(const RunArgs& a) {
  const ModelConfig cfg = load_model_config(a.config);
  const FmwFile w = load_fmw(a.weights);
  const bool quant = is_quantized(w);
  const std::string path = a.path.empty() ? (quant ? "quant" : "ref") : a.path;
  require(path != "ref" || !quant, Errc::already_quantized, "--path ref needs float weights, " + a.weights + " is quantized");
  require(path != "quant" || quant, Errc::invalid_argument,
          "--path quant needs quantized weights; run `fxmamba quantize` on " + a.weights + " first");
  if (quant) {
    const QuantModel qm = quant_model_from_fmw(w, cfg);
    return run_model(qm, &qm, a);
  }
  return run_model(float_model_from_fmw(w, cfg), nullptr, a);
}

// ---------------------------------------------------------------------------

struct ErrorReportArgs {
  std::string weights_f, weights_q, config, input;
  bool json = false;
  unsigned threads = 1;
};

void print_report(const ErrorReport& r) {
  std::cout << "positions " << r.positions << ", " << (r.quantized ? "quantized" : "float") << " weights\n";
  std::cout << fmt("%-12s %-12s %-12s %-12s %-25s %s\n", "layer", "rel_l2", "cosine", "max_abs",
                   "in_proj had/plain", "out_proj had/plain");
  auto lin = [](const LinearError& e) { return fmt("%.3e/%.3e", e.hadamard_rel_l2, e.plain_rel_l2); };
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    const LayerReport& l = r.layers[i];
    std::cout << fmt("%-12zu %-12.4e %-12.8f %-12.4e %-25s %s\n", i, l.metrics.rel_l2, l.metrics.cosine,
                     l.metrics.max_abs, lin(l.linears[0]).c_str(), lin(l.linears[1]).c_str());
  }
  std::cout << fmt("%-12s %-12.4e %-12.8f %-12.4e\n", "end-to-end", r.end_to_end.rel_l2, r.end_to_end.cosine,
                   r.end_to_end.max_abs);
  print_stats(r.stats);
}

int cmd_error_report(const ErrorReportArgs& a) {
  const ModelConfig cfg = load_model_config(a.config);
  const FloatModel fm = float_model_from_fmw(load_fmw(a.weights_f), cfg);
  const FmwFile q = load_fmw(a.weights_q);
  const ModelInput in = input_from_fmw(load_fmw(a.input), cfg);
  const RunOptions opt{a.threads};
  const ErrorReport r = is_quantized(q) ? error_report(fm, quant_model_from_fmw(q, cfg), in, opt)
                                        : error_report(fm, float_model_from_fmw(q, cfg), in, opt);
  if (a.json) {
    std::cout << to_json(r).dump(2) << '\n';
  } else {
    print_report(r);
  }
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_dump_pwl() {
  std::cout << "v_lo,slope,intercept,slope_code,intercept_code\n";
  for (const PwlSegment& s : default_pwl_table().segments)
    std::cout << fmt("%.17g,%.17g,%.17g,%d,%d\n", s.v_lo, s.slope, s.intercept, s.slope_code, s.intercept_code);
  return 0;
}

// ---------------------------------------------------------------------------

struct PerfArgs {
  std::string config, hw, mode = "decode";
  std::uint64_t tokens = 1024;
  std::optional<double> watts;
  bool overlap = false;
  bool json = false;
};

void print_cycle_report(const CycleReport& r) {
  std::cout << fmt("%-12s %s\n", "mode", r.mode.c_str());
  std::cout << fmt("%-12s %llu\n", "tokens", static_cast<unsigned long long>(r.tokens));
  std::cout << fmt("%-12s %16s %8s\n", "module", "cycles", "share");
  const std::pair<const char*, std::uint64_t> rows[] = {
      {"linear", r.linear}, {"conv", r.conv}, {"ssm", r.ssm}, {"norm_silu", r.norm_silu}, {"other", r.other}};
  for (const auto& [name, cyc] : rows)
    std::cout << fmt("%-12s %16llu %8.4f\n", name, static_cast<unsigned long long>(cyc), r.share(cyc));
  std::cout << fmt("%-12s %16llu%s\n", "total", static_cast<unsigned long long>(r.total),
                   r.overlap ? " (overlapped)" : "");
  std::cout << fmt("%-12s %.6f s\n", "time", r.seconds);
  std::cout << fmt("%-12s %.4f tokens/s\n", "throughput", r.tokens_per_s);
  if (r.tokens_per_s_per_w) std::cout << fmt("%-12s %.4f tokens/s/W\n", "efficiency", *r.tokens_per_s_per_w);
}

int cmd_perf(const PerfArgs& a) {
  const ModelConfig cfg = a.config.empty() ? mamba2_2p7b_config() : load_model_config(a.config);
  HwConfig hw = a.hw.empty() ? HwConfig{} : hw_config_from_json(load_json(a.hw));
  if (a.overlap) hw.overlap = true;
  const CycleReport r =
      a.mode == "prefill" ? estimate_prefill(a.tokens, cfg, hw, a.watts) : estimate_decode(cfg, hw, a.watts);
  if (a.json) {
    std::cout << to_json(r).dump(2) << '\n';
  } else {
    print_cycle_report(r);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fxmamba: quantized Mamba2 inference, error analysis and cycle estimates"};
  app.require_subcommand(1);
  std::function<int()> action;
  const auto threads_check = CLI::Range(1u, 1024u);

  QuantizeArgs qa;
  auto* quantize = app.add_subcommand("quantize", "Quantize a float checkpoint");
  quantize->add_option("--in", qa.in, "Float checkpoint (FMW)")->required();
  quantize->add_option("--config", qa.config, "Model config (JSON)")->required();
  quantize->add_option("--calib", qa.calib, "Calibration input (FMW); a fixed synthetic sample when omitted");
  quantize->add_option("--calib-length", qa.calib_length, "Length of the synthetic calibration sample")
      ->check(CLI::Range(std::size_t{1}, std::size_t{1} << 20));
  quantize->add_option("--out", qa.out, "Quantized checkpoint (FMW)")->required();
  quantize->add_option("--threads", qa.threads, "Worker threads")->check(threads_check);
  quantize->callback([&] { action = [&] { return cmd_quantize(qa); }; });

  RunArgs ra;
  auto* run = app.add_subcommand("run", "Run prefill or decode");
  run->add_option("--weights", ra.weights, "Float or quantized checkpoint (FMW)")->required();
  run->add_option("--config", ra.config, "Model config (JSON)")->required();
  run->add_option("--mode", ra.mode, "prefill, or decode one position at a time")
      ->check(CLI::IsMember({"prefill", "decode"}));
  run->add_option("--input", ra.input, "Input tokens or hidden rows (FMW)")->required();
  run->add_option("--steps", ra.steps, "Greedy decode steps after the input");
  run->add_option("--out", ra.out, "Output tensors (FMW)")->required();
  run->add_option("--path", ra.path, "quant or ref; defaults to what the weights hold")
      ->check(CLI::IsMember({"quant", "ref"}));
  run->add_option("--state-in", ra.state_in, "Decode caches to start from (FMW); zero caches when omitted");
  run->add_option("--state-out", ra.state_out, "Write the final decode caches (FMW)");
  run->add_option("--threads", ra.threads, "Worker threads")->check(threads_check);
  run->callback([&] { action = [&] { return cmd_run(ra); }; });

  ErrorReportArgs ea;
  auto* report = app.add_subcommand("error-report", "Compare a float model with a second weight set");
  report->add_option("--weights-f", ea.weights_f, "Float checkpoint (FMW)")->required();
  report->add_option("--weights-q", ea.weights_q, "Quantized or float checkpoint (FMW)")->required();
  report->add_option("--config", ea.config, "Model config (JSON)")->required();
  report->add_option("--input", ea.input, "Input tokens or hidden rows (FMW)")->required();
  report->add_flag("--json", ea.json, "Print JSON (schema fxmamba.error-report/1)");
  report->add_option("--threads", ea.threads, "Worker threads")->check(threads_check);
  report->callback([&] { action = [&] { return cmd_error_report(ea); }; });

  auto* pwl = app.add_subcommand("dump-pwl", "Print the exponential PWL table as CSV");
  pwl->callback([&] { action = [] { return cmd_dump_pwl(); }; });

  PerfArgs pa;
  auto* perf = app.add_subcommand("perf", "Estimate accelerator cycles");
  perf->add_option("--config", pa.config, "Model config (JSON); Mamba2-2.7B when omitted");
  perf->add_option("--hw", pa.hw, "Hardware config (JSON); defaults when omitted");
  perf->add_option("--mode", pa.mode, "prefill or decode")->check(CLI::IsMember({"prefill", "decode"}));
  perf->add_option("--tokens", pa.tokens, "Prefill length")->check(CLI::Range(std::uint64_t{1}, std::uint64_t{1} << 40));
  perf->add_option("--watts", pa.watts, "Board power for tokens/s/W")->check(CLI::PositiveNumber);
  perf->add_flag("--overlap", pa.overlap, "Compose modules as fully pipelined");
  perf->add_flag("--json", pa.json, "Print JSON (schema fxmamba.perf/1)");
  perf->callback([&] { action = [&] { return cmd_perf(pa); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  try {
    return action();
  } catch (const Error& e) {
    std::cerr << "error [" << errc_name(e.code()) << "]: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
  }
  return 2;
}

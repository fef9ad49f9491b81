// deepcot command-line tool.
//
// Exit codes: 0 ok, 1 verification failure, 2 usage/config error, 3 I/O or file-format error.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "deepcot/bench.hpp"
#include "deepcot/diffanalysis.hpp"
#include "deepcot/fixtures.hpp"
#include "deepcot/model.hpp"
#include "deepcot/persistence.hpp"
#include "deepcot/verify.hpp"

namespace fs = std::filesystem;
using namespace deepcot;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

// --config accepts inline JSON, a config file, or a weight manifest.
ModelConfig read_config(const std::string& arg) {
  json j;
  if (!arg.empty() && arg.front() == '{') {
    try {
      j = json::parse(arg);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("inline config is not valid JSON: ") + e.what());
    }
  } else {
    j = read_manifest(arg);
  }
  if (j.contains("config")) return config_from_json(j.at("config"));
  return config_from_json(j);
}

std::vector<std::size_t> parse_sizes(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v == 0) throw ConfigError("bad size '" + item + "' in list '" + csv + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError("empty size list");
  return out;
}

template <std::floating_point T>
void run_stream(const fs::path& manifest, const fs::path& stream, const fs::path& out) {
  const auto model = load_model<T>(manifest);
  const auto tokens = load_stream<T>(stream);
  if (tokens.cols() != model.config.dim) {
    throw ConfigError("stream '" + stream.string() + "' has d=" + std::to_string(tokens.cols()) +
                      " but the model expects d=" + std::to_string(model.config.dim));
  }
  StreamState<T> state(model.config);
  Matrix<T> outputs(tokens.rows(), model.config.dim);
  for (std::size_t t = 0; t < tokens.rows(); ++t) outputs.set_row(t, stream_step<T>(model, state, tokens.row(t)));
  save_stream(out, outputs);
}

struct VerifyArgs {
  std::uint64_t seed = verify::Options{}.seed;
  std::string sizes = "1,2,4,8";
  bool skip_latency = false;
  bool show_timings = false;
  bool inject_fault = false;
};

int cmd_verify(const VerifyArgs& a) {
  verify::Options opt;
  opt.seed = a.seed;
  opt.windows = parse_sizes(a.sizes);
  opt.latency = !a.skip_latency;
  testing::eviction_fault() = a.inject_fault;
  const auto results = verify::run_all(opt);
  testing::eviction_fault() = false;
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.passed;
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name;
    if (r.timing_dependent && !a.show_timings) {
      std::cout << ": wall-clock details hidden (use --show-timings)\n";
    } else {
      std::cout << ": " << r.detail << '\n';
    }
  }
  std::cout << (ok ? "all criteria passed\n" : "verification FAILED\n");
  return ok ? kExitOk : kExitVerifyFailed;
}

struct InitArgs {
  std::string config;
  std::uint64_t seed = 0;
  std::string manifest;
  std::string blob;
};

int cmd_init(const InitArgs& a) {
  const auto cfg = read_config(a.config);
  const auto model = random_model<double>(cfg, a.seed);
  const fs::path manifest(a.manifest);
  const fs::path blob = a.blob.empty() ? fs::path(manifest).replace_extension(".bin") : fs::path(a.blob);
  save_model(model, manifest, blob);
  std::cout << "wrote " << manifest.string() << " and " << blob.string() << '\n';
  return kExitOk;
}

struct TokensArgs {
  std::size_t dim = 0;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_tokens(const TokensArgs& a) {
  if (a.dim == 0) throw ConfigError("--dim must be >= 1");
  save_stream(a.out, random_tokens<double>(a.count, a.dim, a.seed));
  return kExitOk;
}

struct DeltaArgs {
  std::string model;
  std::string config;
  std::uint64_t seed = 0;
  std::size_t length = 0;
  std::string out;
};

int cmd_delta(const DeltaArgs& a) {
  Model<double> model;
  if (!a.model.empty()) {
    model = load_model<double>(a.model);
  } else if (!a.config.empty()) {
    model = random_model<double>(read_config(a.config), a.seed);
  } else {
    throw ConfigError("delta needs --model or --config");
  }
  const std::size_t n = model.config.window;
  const std::size_t length = a.length == 0 ? 2 * n + 1 : a.length;
  const auto x = random_tokens<double>(length, model.config.dim, a.seed + 1);
  json report = to_json(measure_deltas(model, x, a.seed));
  if (model.config.is_decoupled() && model.config.depth >= 2) {
    report["linear_propagation"] = to_json(verify_linear_propagation(model, x));
  }
  if (a.out.empty()) {
    std::cout << report.dump(2) << '\n';
  } else {
    save_report(report, a.out);
  }
  return kExitOk;
}

struct BenchArgs {
  std::string config;
  std::string windows = "64,128,256,512,1024";
  std::string modes = "continual,oracle_bidirectional";
  std::size_t batch = 1;
  std::size_t steps = 64;
  std::size_t warmup = 8;
  std::uint64_t seed = 0;
  std::string csv;
  std::string svg;
};

int cmd_bench(const BenchArgs& a) {
  const auto cfg = read_config(a.config);
  SweepOptions opt;
  opt.batch = a.batch;
  opt.steps = a.steps;
  opt.warmup = a.warmup;
  opt.seed = a.seed;
  opt.modes.clear();
  std::stringstream ss(a.modes);
  for (std::string m; std::getline(ss, m, ',');) {
    if (!m.empty()) opt.modes.push_back(parse_mode(m));
  }
  const auto result = latency_sweep(cfg, parse_sizes(a.windows), opt);
  if (a.csv.empty()) {
    write_csv(std::cout, result);
  } else {
    std::ofstream os(a.csv);
    if (!os) throw IoError("cannot open '" + a.csv + "' for writing");
    write_csv(os, result);
  }
  if (!a.svg.empty()) {
    std::ofstream os(a.svg);
    if (!os) throw IoError("cannot open '" + a.svg + "' for writing");
    os << render_svg(result);
  }
  return kExitOk;
}

json flops_json(const FlopsBreakdown& f) {
  json layers = json::array();
  for (const auto& l : f.layers) {
    layers.push_back({{"qkv_proj", l.qkv_proj},
                      {"scores", l.scores},
                      {"activation", l.activation},
                      {"weighted_sum", l.weighted_sum},
                      {"out_proj", l.out_proj},
                      {"ff", l.ff},
                      {"total", l.total()}});
  }
  return {{"mode", std::string(to_string(f.mode))},
          {"window", f.window},
          {"layers", layers},
          {"per_step", f.per_step},
          {"per_window", f.per_window}};
}

int cmd_flops(const std::string& config, std::size_t window) {
  const auto cfg = read_config(config);
  const std::size_t n = window == 0 ? cfg.window : window;
  json out = json::array();
  for (auto mode : {ExecutionMode::Continual, ExecutionMode::OracleBidirectional}) {
    out.push_back(flops_json(count_flops(cfg, mode, n)));
  }
  std::cout << out.dump(2) << '\n';
  return kExitOk;
}

int cmd_convert(const std::string& in, const std::string& out) {
  for (const auto& w : convert_manifest(in, out)) std::cerr << "warning: " << w << '\n';
  return kExitOk;
}

int cmd_check_fixtures(const std::string& dir) {
  bool ok = true;
  const auto cases = read_fixture_index(dir);
  for (const auto& fc : cases) {
    const auto r = check_fixture(fc);
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.case_id << ": " << r.detail << '\n';
    ok = ok && r.passed;
  }
  std::cout << cases.size() << " fixture cases, " << (ok ? "all passed" : "FAILED") << '\n';
  return ok ? kExitOk : kExitVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep continual transformer encoder: streaming inference, oracles, analysis and benchmarks"};
  app.require_subcommand(1);

  VerifyArgs va;
  auto* verify_cmd = app.add_subcommand("verify", "Run the acceptance suite");
  verify_cmd->add_option("--seed", va.seed, "Seed for every random draw");
  verify_cmd->add_option("--sizes", va.sizes, "Window sizes of the equivalence grid, e.g. 1,2,4,8");
  verify_cmd->add_flag("--skip-latency", va.skip_latency, "Skip the wall-clock latency criterion");
  verify_cmd->add_flag("--show-timings", va.show_timings, "Print wall-clock measurements");
  verify_cmd->add_flag("--inject-eviction-fault", va.inject_fault, "Test hook: evict newest instead of oldest")
      ->group("");

  InitArgs ia;
  auto* init_cmd = app.add_subcommand("init", "Write a randomly initialized model");
  init_cmd->add_option("--config", ia.config, "Config as inline JSON or file")->required();
  init_cmd->add_option("--seed", ia.seed);
  init_cmd->add_option("--out", ia.manifest, "Manifest path")->required();
  init_cmd->add_option("--blob", ia.blob, "Blob path (default: manifest with .bin)");

  TokensArgs ta;
  auto* tokens_cmd = app.add_subcommand("tokens", "Write a token stream of i.i.d. standard normal tokens");
  tokens_cmd->add_option("--dim", ta.dim)->required();
  tokens_cmd->add_option("--count", ta.count)->required();
  tokens_cmd->add_option("--seed", ta.seed);
  tokens_cmd->add_option("--out", ta.out)->required();

  std::string run_model, run_stream_path, run_out;
  int precision = 32;
  auto* run_cmd = app.add_subcommand("run", "Stream a token file through a model");
  run_cmd->add_option("--model", run_model, "Weight manifest")->required();
  run_cmd->add_option("--stream", run_stream_path, "Input token stream")->required();
  run_cmd->add_option("--out", run_out, "Output token stream")->required();
  run_cmd->add_option("--precision", precision, "Arithmetic precision")->check(CLI::IsMember({32, 64}));

  DeltaArgs da;
  auto* delta_cmd = app.add_subcommand("delta", "Measure continual vs. base stack differences");
  delta_cmd->add_option("--model", da.model, "Weight manifest");
  delta_cmd->add_option("--config", da.config, "Config for a random model (with --seed)");
  delta_cmd->add_option("--seed", da.seed);
  delta_cmd->add_option("--length", da.length, "Stream length (default 2n+1)");
  delta_cmd->add_option("--out", da.out, "Report path (default stdout)");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "Latency sweep over window sizes");
  bench_cmd->add_option("--config", ba.config)->required();
  bench_cmd->add_option("--window-sizes", ba.windows);
  bench_cmd->add_option("--modes", ba.modes, "continual,oracle_bidirectional,oracle_causal_banded");
  bench_cmd->add_option("--batch", ba.batch);
  bench_cmd->add_option("--steps", ba.steps, "Steps per cell including warmup");
  bench_cmd->add_option("--warmup", ba.warmup);
  bench_cmd->add_option("--seed", ba.seed);
  bench_cmd->add_option("--csv", ba.csv, "CSV path (default stdout)");
  bench_cmd->add_option("--svg", ba.svg, "Optional SVG plot path");

  std::string flops_config;
  std::size_t flops_window = 0;
  auto* flops_cmd = app.add_subcommand("flops", "Analytic FLOP counts");
  flops_cmd->add_option("--config", flops_config)->required();
  flops_cmd->add_option("--window", flops_window, "Window size (default: config window)");

  std::string conv_in, conv_out;
  auto* convert_cmd = app.add_subcommand("convert", "Convert a non-continual manifest to continual mode");
  convert_cmd->add_option("--in", conv_in)->required();
  convert_cmd->add_option("--out", conv_out)->required();

  std::string fixture_dir;
  auto* fixtures_cmd = app.add_subcommand("check-fixtures", "Stream externally generated reference cases");
  fixtures_cmd->add_option("--dir", fixture_dir, "Directory containing index.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*verify_cmd) return cmd_verify(va);
    if (*init_cmd) return cmd_init(ia);
    if (*tokens_cmd) return cmd_tokens(ta);
    if (*run_cmd) {
      if (precision == 64) {
        run_stream<double>(run_model, run_stream_path, run_out);
      } else {
        run_stream<float>(run_model, run_stream_path, run_out);
      }
      return kExitOk;
    }
    if (*delta_cmd) return cmd_delta(da);
    if (*bench_cmd) return cmd_bench(ba);
    if (*flops_cmd) return cmd_flops(flops_config, flops_window);
    if (*convert_cmd) return cmd_convert(conv_in, conv_out);
    if (*fixtures_cmd) return cmd_check_fixtures(fixture_dir);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

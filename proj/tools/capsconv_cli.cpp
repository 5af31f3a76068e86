// capsconv: correctness checks and engine benchmarks for capsule convolution.
//
//   capsconv check [--config FILE] [--seed N] [--workers N]
//   capsconv bench [--config FILE] [--engine NAME] [--workers N] [--scalar f32|f64]
//                  [--csv FILE] [--seed N] [--reps N]
//
// Exit status: 0 success, 1 check failure, 2 configuration error, 3 I/O error.

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "capsconv/capsconv.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

struct Overrides {
  std::string config;
  std::string engine;
  std::string scalar;
  std::string csv;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> reps;
};

capsconv::AppConfig load(const Overrides& o) {
  auto cfg = o.config.empty() ? capsconv::parse_config("") : capsconv::load_config(o.config);
  if (o.workers) {
    if (*o.workers == 0) throw capsconv::ConfigError("--workers", "must be >= 1");
    cfg.run.workers = *o.workers;
  }
  if (o.reps) {
    if (*o.reps < 3) throw capsconv::ConfigError("--reps", "benchmark needs at least 3 repetitions");
    cfg.run.reps = *o.reps;
  }
  if (!o.scalar.empty()) cfg.network.scalar = capsconv::parse_scalar_kind(o.scalar, "--scalar");
  if (!o.engine.empty()) {
    if (o.engine == "all") {
      cfg.run.engines.assign(std::begin(capsconv::kAllEngines), std::end(capsconv::kAllEngines));
    } else if (auto e = capsconv::parse_engine(o.engine)) {
      cfg.run.engines = {*e};
    } else {
      throw capsconv::ConfigError("--engine", "expected naive, accel, indexed or all");
    }
  }
  return cfg;
}

int run_check(const Overrides& o) {
  auto cfg = load(o);
  if (o.seed) cfg.check.seed = *o.seed;
  if (o.workers) cfg.check.worker_counts.push_back(*o.workers);
  const auto report = capsconv::run_check_suites(cfg);
  std::cout << report.summary();
  return report.passed() ? kExitOk : kExitCheckFailed;
}

int run_bench(const Overrides& o) {
  auto cfg = load(o);
  if (o.seed) cfg.network.seed = *o.seed;
  const auto report = capsconv::run_bench(cfg);
  std::cout << capsconv::to_markdown(report);
  if (!o.csv.empty()) capsconv::emit_csv(report, o.csv);
  return kExitOk;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Configuration file");
  cmd->add_option("--workers", o.workers, "Worker threads for the engines");
  cmd->add_option("--seed", o.seed, "Seed for generated inputs");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capsule convolution checks and benchmarks", "capsconv"};
  app.require_subcommand(1);
  Overrides check_opts, bench_opts;

  auto* check = app.add_subcommand("check", "Run the correctness suites");
  add_common(check, check_opts);

  auto* bench = app.add_subcommand("bench", "Time forward and backward passes per engine");
  add_common(bench, bench_opts);
  bench->add_option("--engine", bench_opts.engine, "naive, accel, indexed or all");
  bench->add_option("--scalar", bench_opts.scalar, "f32 or f64");
  bench->add_option("--csv", bench_opts.csv, "Also write the report as CSV");
  bench->add_option("--reps", bench_opts.reps, "Timed repetitions (>= 3)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*check) return run_check(check_opts);
    return run_bench(bench_opts);
  } catch (const capsconv::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const capsconv::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const capsconv::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
}

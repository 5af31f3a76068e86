#pragma once

// Forward/backward timing of each engine on a configured network, with CSV
// and markdown report emission.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "capsconv/capsnet.hpp"
#include "capsconv/compare.hpp"
#include "capsconv/config.hpp"
#include "capsconv/errors.hpp"

namespace capsconv {

struct BenchRow {
  std::string engine;
  double total_ms = 0;
  double forward_ms = 0;
  double backward_ms = 0;
  double speedup = 0;

  friend bool operator==(const BenchRow&, const BenchRow&) = default;
};

struct BenchMeta {
  ScalarKind scalar = ScalarKind::f32;
  std::size_t workers = 1;
  std::size_t reps = 0;
  std::size_t warmup = 0;
  std::uint64_t seed = 0;
  AccumulationMode mode = AccumulationMode::optimized;
  /// Sum of the input tensor in double, to confirm two runs saw the same data.
  double input_checksum = 0;
};

struct BenchReport {
  BenchMeta meta;
  std::vector<BenchRow> rows;

  const BenchRow* find(std::string_view engine) const {
    for (const auto& r : rows)
      if (r.engine == engine) return &r;
    return nullptr;
  }
};

inline double median(std::vector<double> samples) {
  if (samples.empty()) return 0;
  std::sort(samples.begin(), samples.end());
  const std::size_t n = samples.size();
  return n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

template <Scalar T>
BenchReport run_bench_typed(const AppConfig& cfg) {
  const auto& net = cfg.network;
  const auto& run = cfg.run;
  BenchReport report;
  report.meta = {net.scalar, run.workers, run.reps, run.warmup, net.seed, run.mode, 0};

  Network<T> model(net);
  const auto x = random_input<T>(net, net.seed);
  for (T v : x.data()) report.meta.input_checksum += static_cast<double>(v);
  const ExecPolicy policy{run.workers, run.mode};

  std::vector<Engine> engines{Engine::naive};
  for (Engine e : run.engines)
    if (e != Engine::naive) engines.push_back(e);

  for (Engine e : engines) {
    model.set_engine(e);
    std::vector<double> fwd, bwd;
    for (std::size_t it = 0; it < run.warmup + run.reps; ++it) {
      auto start = Clock::now();
      auto [out, tape] = model.forward(x, policy);
      const double f = elapsed_ms(start);
      // L = sum(O^2)/2, so dL/dO = O.
      start = Clock::now();
      auto grads = model.backward(tape, out, policy);
      const double b = elapsed_ms(start);
      if (it >= run.warmup) {
        fwd.push_back(f);
        bwd.push_back(b);
      }
    }
    BenchRow row{to_string(e), 0, median(fwd), median(bwd), 0};
    row.total_ms = row.forward_ms + row.backward_ms;
    report.rows.push_back(row);
  }
  const double base = report.rows.front().total_ms;
  for (auto& row : report.rows) row.speedup = row.engine == "naive" ? 1.0 : base / row.total_ms;
  return report;
}

}  // namespace detail

/// Times one forward and one backward pass per engine. The naive engine is
/// always measured and always reported first since it is the speedup baseline.
inline BenchReport run_bench(const AppConfig& cfg) {
  if (cfg.run.reps < 3) throw ConfigError("run.reps", "benchmark needs at least 3 repetitions");
  if (cfg.run.warmup < 1) throw ConfigError("run.warmup", "benchmark needs at least 1 warmup");
  if (cfg.network.scalar == ScalarKind::f32) return detail::run_bench_typed<float>(cfg);
  return detail::run_bench_typed<double>(cfg);
}

inline constexpr const char* kCsvHeader = "engine,total_ms,forward_ms,backward_ms,speedup";

inline std::string to_csv(const BenchReport& report) {
  std::string out = std::string(kCsvHeader) + "\n";
  char line[256];
  for (const auto& r : report.rows) {
    std::snprintf(line, sizeof line, "%s,%.3f,%.3f,%.3f,%.3f\n", r.engine.c_str(), r.total_ms,
                  r.forward_ms, r.backward_ms, r.speedup);
    out += line;
  }
  return out;
}

inline void emit_csv(const BenchReport& report, const std::string& path) {
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot open '" + path + "' for writing");
  const auto text = to_csv(report);
  file.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!file) throw IoError("failed writing '" + path + "'");
}

/// Parses CSV produced by to_csv. Values come back rounded to 3 decimals.
inline std::vector<BenchRow> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw IoError("missing CSV header");
  std::vector<BenchRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::vector<std::string> cells;
    for (std::string cell; std::getline(fields, cell, ',');) cells.push_back(cell);
    if (cells.size() != 5) throw IoError("malformed CSV row '" + line + "'");
    try {
      rows.push_back({cells[0], std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3]),
                      std::stod(cells[4])});
    } catch (const std::exception&) {
      throw IoError("malformed CSV row '" + line + "'");
    }
  }
  return rows;
}

inline std::string to_markdown(const BenchReport& report) {
  std::ostringstream out;
  const auto& m = report.meta;
  out << "scalar=" << to_string(m.scalar) << " workers=" << m.workers << " reps=" << m.reps
      << " warmup=" << m.warmup << " seed=" << m.seed << " mode=" << to_string(m.mode);
  char checksum[64];
  std::snprintf(checksum, sizeof checksum, "%.17g", m.input_checksum);
  out << " input_checksum=" << checksum << "\n\n";
  out << "| engine | total ms | forward ms | backward ms | speedup |\n";
  out << "|---|---:|---:|---:|---:|\n";
  char line[256];
  for (const auto& r : report.rows) {
    std::snprintf(line, sizeof line, "| %s | %.3f | %.3f | %.3f | %.2fx |\n", r.engine.c_str(),
                  r.total_ms, r.forward_ms, r.backward_ms, r.speedup);
    out << line;
  }
  return out.str();
}

}  // namespace capsconv

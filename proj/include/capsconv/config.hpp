#pragma once

// Flat key=value configuration with [sections]. Several pairs may share a line:
//
//   [input]
//   batch=8 channels=1 height=20 width=20 pose=1x4x4
//   [layer.1]
//   k=3 stride=1 in_ch=1 out_ch=4 pose=1x4x4
//
// '#' and ';' start comments.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "capsconv/capsnet.hpp"
#include "capsconv/errors.hpp"
#include "capsconv/parallel.hpp"
#include "capsconv/tensor.hpp"

namespace capsconv {

struct RunOptions {
  std::size_t workers = 4;
  std::size_t reps = 5;
  std::size_t warmup = 1;
  std::vector<Engine> engines{std::begin(kAllEngines), std::end(kAllEngines)};
  AccumulationMode mode = AccumulationMode::optimized;
};

struct CheckOptions {
  std::uint64_t seed = 2021;
  std::size_t instances = 100;
  std::size_t gradient_instances = 20;
  std::size_t adjoint_instances = 20;
  std::size_t determinism_instances = 5;
  std::vector<std::size_t> worker_counts{1, 2, 8};
  /// Replaces every relative tolerance when set. Bitwise checks stay bitwise.
  std::optional<double> tolerance;
};

struct AppConfig {
  NetworkConfig network = default_network_config();
  RunOptions run;
  CheckOptions check;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

struct Field {
  std::string section;
  std::string key;
  std::string value;
  std::size_t line = 0;

  std::string name() const { return section.empty() ? key : section + "." + key; }
};

template <typename U>
U parse_unsigned(const Field& f) {
  U value{};
  const char* begin = f.value.data();
  const char* end = begin + f.value.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || f.value.empty())
    throw ConfigError(f.name(), "expected a non-negative integer, got '" + f.value + "'", f.line);
  return value;
}

inline std::size_t parse_positive(const Field& f) {
  const auto v = parse_unsigned<std::size_t>(f);
  if (v == 0) throw ConfigError(f.name(), "must be >= 1", f.line);
  return v;
}

inline double parse_double(const Field& f) {
  try {
    std::size_t used = 0;
    const double v = std::stod(f.value, &used);
    if (used != f.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(f.name(), "expected a number, got '" + f.value + "'", f.line);
  }
}

/// "SxMxK", or "MxK" for a single slice.
inline PoseDims parse_pose(const Field& f) {
  std::vector<std::size_t> parts;
  std::string_view rest = f.value;
  while (true) {
    const auto x = rest.find('x');
    Field part = f;
    part.value = std::string(rest.substr(0, x));
    parts.push_back(parse_positive(part));
    if (x == std::string_view::npos) break;
    rest.remove_prefix(x + 1);
  }
  if (parts.size() == 2) return {1, parts[0], parts[1]};
  if (parts.size() == 3) return {parts[0], parts[1], parts[2]};
  throw ConfigError(f.name(), "expected pose as SxMxK, got '" + f.value + "'", f.line);
}

inline Engine parse_engine_field(const Field& f) {
  if (auto e = parse_engine(f.value)) return *e;
  throw ConfigError(f.name(), "unknown engine '" + f.value + "'", f.line);
}

inline std::vector<Engine> parse_engine_list(const Field& f) {
  if (f.value == "all") return {std::begin(kAllEngines), std::end(kAllEngines)};
  return {parse_engine_field(f)};
}

}  // namespace detail

inline ScalarKind parse_scalar_kind(std::string_view s, const std::string& field = "scalar") {
  if (s == "f32") return ScalarKind::f32;
  if (s == "f64") return ScalarKind::f64;
  throw ConfigError(field, "expected f32 or f64, got '" + std::string(s) + "'");
}

inline AppConfig parse_config(std::string_view text) {
  using detail::Field;
  std::vector<Field> fields;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    std::string_view line = raw;
    if (const auto c = line.find_first_of("#;"); c != std::string_view::npos)
      line = line.substr(0, c);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("", "unterminated section header", line_no);
      section = std::string(detail::trim(line.substr(1, line.size() - 2)));
      if (section.empty()) throw ConfigError("", "empty section name", line_no);
      continue;
    }
    std::istringstream tokens{std::string(line)};
    for (std::string token; tokens >> token;) {
      const auto eq = token.find('=');
      if (eq == std::string::npos || eq == 0)
        throw ConfigError(section, "expected key=value, got '" + token + "'", line_no);
      fields.push_back({section, token.substr(0, eq), token.substr(eq + 1), line_no});
    }
  }

  AppConfig cfg;
  std::map<std::size_t, LayerSpec> layers;
  bool saw_input = false;
  for (const auto& f : fields) {
    const auto& k = f.key;
    if (f.section == "input") {
      saw_input = true;
      auto& in = cfg.network.input;
      if (k == "batch") in.batch = detail::parse_positive(f);
      else if (k == "channels" || k == "in_ch") in.channels = detail::parse_positive(f);
      else if (k == "height") in.height = detail::parse_positive(f);
      else if (k == "width") in.width = detail::parse_positive(f);
      else if (k == "size") in.height = in.width = detail::parse_positive(f);
      else if (k == "pose") in.pose = detail::parse_pose(f);
      else throw ConfigError(f.name(), "unknown key", f.line);
    } else if (f.section.rfind("layer.", 0) == 0) {
      const Field idx{"", f.section, f.section.substr(6), f.line};
      const auto n = detail::parse_positive(idx);
      auto& layer = layers[n];
      if (k == "k") layer.k_h = layer.k_w = detail::parse_positive(f);
      else if (k == "k_h") layer.k_h = detail::parse_positive(f);
      else if (k == "k_w") layer.k_w = detail::parse_positive(f);
      else if (k == "stride") layer.cfg.stride = detail::parse_positive(f);
      else if (k == "padding") layer.cfg.padding = detail::parse_unsigned<std::size_t>(f);
      else if (k == "in_ch") layer.in_channels = detail::parse_positive(f);
      else if (k == "out_ch") layer.out_channels = detail::parse_positive(f);
      else if (k == "pose") layer.kernel_pose = detail::parse_pose(f);
      else if (k == "engine") layer.engine = detail::parse_engine_field(f);
      else throw ConfigError(f.name(), "unknown key", f.line);
    } else if (f.section == "run") {
      if (k == "seed") cfg.network.seed = detail::parse_unsigned<std::uint64_t>(f);
      else if (k == "scalar") {
        if (f.value == "f32") cfg.network.scalar = ScalarKind::f32;
        else if (f.value == "f64") cfg.network.scalar = ScalarKind::f64;
        else throw ConfigError(f.name(), "expected f32 or f64, got '" + f.value + "'", f.line);
      } else if (k == "workers") cfg.run.workers = detail::parse_positive(f);
      else if (k == "reps") cfg.run.reps = detail::parse_positive(f);
      else if (k == "warmup") cfg.run.warmup = detail::parse_unsigned<std::size_t>(f);
      else if (k == "engine") cfg.run.engines = detail::parse_engine_list(f);
      else if (k == "mode") {
        if (f.value == "reference") cfg.run.mode = AccumulationMode::reference;
        else if (f.value == "optimized") cfg.run.mode = AccumulationMode::optimized;
        else throw ConfigError(f.name(), "expected reference or optimized", f.line);
      } else throw ConfigError(f.name(), "unknown key", f.line);
    } else if (f.section == "check") {
      auto& c = cfg.check;
      if (k == "seed") c.seed = detail::parse_unsigned<std::uint64_t>(f);
      else if (k == "instances") c.instances = detail::parse_unsigned<std::size_t>(f);
      else if (k == "gradient_instances") c.gradient_instances = detail::parse_unsigned<std::size_t>(f);
      else if (k == "adjoint_instances") c.adjoint_instances = detail::parse_unsigned<std::size_t>(f);
      else if (k == "determinism_instances")
        c.determinism_instances = detail::parse_unsigned<std::size_t>(f);
      else if (k == "tolerance") {
        const double tol = detail::parse_double(f);
        if (!(tol >= 0)) throw ConfigError(f.name(), "must be >= 0", f.line);
        c.tolerance = tol;
      } else throw ConfigError(f.name(), "unknown key", f.line);
    } else {
      throw ConfigError(f.section, "unknown section", f.line);
    }
  }

  if (!layers.empty()) {
    cfg.network.layers.clear();
    std::size_t expected = 1;
    for (auto& [n, layer] : layers) {
      if (n != expected)
        throw ConfigError("layer." + std::to_string(expected), "missing layer section");
      cfg.network.layers.push_back(layer);
      ++expected;
    }
  } else if (saw_input) {
    throw ConfigError("layer.1", "no layer sections");
  }

  try {
    cfg.network.geometries();
  } catch (const ShapeError& e) {
    throw ConfigError("layers", e.what());
  }
  if (cfg.run.reps < 3) throw ConfigError("run.reps", "benchmark needs at least 3 repetitions");
  if (cfg.run.warmup < 1) throw ConfigError("run.warmup", "benchmark needs at least 1 warmup");
  return cfg;
}

inline AppConfig load_config(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw IoError("cannot open config file '" + path + "'");
  std::stringstream buffer;
  buffer << file.rdbuf();
  return parse_config(buffer.str());
}

}  // namespace capsconv

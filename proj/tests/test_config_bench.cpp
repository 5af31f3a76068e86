#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "capsconv/bench.hpp"
#include "capsconv/check.hpp"
#include "capsconv/config.hpp"

using namespace capsconv;

namespace {

const std::string kSmallNetwork = R"(
[input]
batch=1 channels=1 size=6 pose=1x2x2
[layer.1]
k=3 in_ch=1 out_ch=2 pose=1x2x2
[layer.2]
k=2 stride=2 padding=1 in_ch=2 out_ch=1 pose=1x2x3 engine=indexed
)";

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("capsconv_test_" + name);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CAPSCONV_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, EmptyTextGivesDefaults) {
  const auto cfg = parse_config("");
  EXPECT_EQ(cfg.network.layers.size(), 5u);
  EXPECT_EQ(cfg.run.workers, 4u);
  EXPECT_EQ(cfg.run.reps, 5u);
  EXPECT_EQ(cfg.network.scalar, ScalarKind::f32);
}

TEST(Config, ShippedDefaultMatchesBuiltIn) {
  const auto cfg = load_config(std::string(CAPSCONV_SOURCE_DIR) + "/configs/default.conf");
  const auto builtin = default_network_config();
  ASSERT_EQ(cfg.network.geometries(), builtin.geometries());
  EXPECT_EQ(cfg.network.scalar, ScalarKind::f32);
  EXPECT_EQ(cfg.network.seed, builtin.seed);
  EXPECT_EQ(cfg.run.workers, 4u);
  EXPECT_EQ(cfg.run.engines.size(), 3u);
}

TEST(Config, ParsesLayersAndOptions) {
  const auto cfg = parse_config(kSmallNetwork + "[run]\nscalar=f64 seed=9 engine=accel ; note\n");
  ASSERT_EQ(cfg.network.layers.size(), 2u);
  const auto& l2 = cfg.network.layers[1];
  EXPECT_EQ(l2.k_h, 2u);
  EXPECT_EQ(l2.cfg.stride, 2u);
  EXPECT_EQ(l2.cfg.padding, 1u);
  EXPECT_EQ(l2.kernel_pose, (PoseDims{1, 2, 3}));
  EXPECT_EQ(l2.engine, Engine::indexed);
  EXPECT_EQ(cfg.network.input.height, 6u);
  EXPECT_EQ(cfg.network.scalar, ScalarKind::f64);
  EXPECT_EQ(cfg.network.seed, 9u);
  EXPECT_EQ(cfg.run.engines, (std::vector<Engine>{Engine::accel}));
}

TEST(Config, StrideZeroNamesField) {
  try {
    parse_config("[input]\nbatch=1 size=5 pose=1x2x2\n[layer.1]\nk=3 stride=0 in_ch=1 out_ch=1 pose=1x2x2\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "layer.1.stride");
    EXPECT_EQ(e.line(), 4u);
    EXPECT_NE(std::string(e.what()).find("layer.1.stride"), std::string::npos);
  }
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("[input]\nbogus=1\n"), ConfigError);
  EXPECT_THROW(parse_config("[nowhere]\nx=1\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nworkers=abc\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nreps=2\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nwarmup=0\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nscalar=f16\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nengine=gpu\n"), ConfigError);
  EXPECT_THROW(parse_config("[check]\ntolerance=-1\n"), ConfigError);
  EXPECT_THROW(parse_config("[run\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\njustaword\n"), ConfigError);
  EXPECT_THROW(parse_config("[input]\nbatch=1 size=5 pose=1x2x2\n[layer.2]\nk=1 in_ch=1 out_ch=1 pose=1x2x2\n"),
               ConfigError);
  EXPECT_THROW(parse_config("[input]\nbatch=1 size=5 pose=1x2x2\n[layer.1]\nk=3 in_ch=2 out_ch=1 pose=1x2x2\n"),
               ConfigError);
  EXPECT_THROW(parse_config("[input]\npose=2x2x2x2\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/capsconv.conf"), IoError);
}

TEST(Csv, EmptyReportIsHeaderOnly) {
  EXPECT_EQ(to_csv(BenchReport{}), "engine,total_ms,forward_ms,backward_ms,speedup\n");
}

TEST(Csv, RoundTripAndByteStability) {
  BenchReport r;
  r.rows = {{"naive", 300.25, 100.125, 200.125, 1.0},
            {"accel", 75.5, 25.25, 50.25, 3.976821192},
            {"indexed", 80.0, 30.0, 50.0, 3.753125}};
  const auto text = to_csv(r);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_EQ(text.back(), '\n');
  const auto rows = parse_csv(text);
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(rows[i].engine, r.rows[i].engine);
    EXPECT_NEAR(rows[i].total_ms, r.rows[i].total_ms, 5e-4);
    EXPECT_NEAR(rows[i].forward_ms, r.rows[i].forward_ms, 5e-4);
    EXPECT_NEAR(rows[i].backward_ms, r.rows[i].backward_ms, 5e-4);
    EXPECT_NEAR(rows[i].speedup, r.rows[i].speedup, 5e-4);
  }
  BenchReport back;
  back.rows = rows;
  EXPECT_EQ(to_csv(back), text);

  const auto path = temp_path("roundtrip.csv");
  emit_csv(r, path.string());
  const auto first = read_file(path);
  emit_csv(r, path.string());
  EXPECT_EQ(read_file(path), first);
  EXPECT_EQ(first, text);
  std::filesystem::remove(path);
  EXPECT_THROW(emit_csv(r, "/nonexistent-dir/x.csv"), IoError);
  EXPECT_THROW(parse_csv("wrong,header\n"), IoError);
  EXPECT_THROW(parse_csv(std::string(kCsvHeader) + "\nnaive,1,2\n"), IoError);
}

TEST(Bench, SmallNetworkReport) {
  auto cfg = parse_config(kSmallNetwork + "[run]\nreps=3 warmup=1 workers=2 engine=all\n");
  const auto a = run_bench(cfg);
  ASSERT_EQ(a.rows.size(), 3u);
  EXPECT_EQ(a.rows[0].engine, "naive");
  EXPECT_EQ(a.rows[0].speedup, 1.0);
  for (const auto& row : a.rows) {
    EXPECT_EQ(row.total_ms, row.forward_ms + row.backward_ms);
    EXPECT_NEAR(row.speedup, a.rows[0].total_ms / row.total_ms, 1e-12);
  }
  const auto b = run_bench(cfg);
  EXPECT_EQ(a.meta.input_checksum, b.meta.input_checksum);
  EXPECT_EQ(a.meta.reps, 3u);
  EXPECT_EQ(a.meta.workers, 2u);

  cfg.run.engines = {Engine::accel};
  const auto c = run_bench(cfg);
  ASSERT_EQ(c.rows.size(), 2u);
  EXPECT_EQ(c.rows[1].engine, "accel");
  cfg.run.reps = 2;
  EXPECT_THROW(run_bench(cfg), ConfigError);
}

TEST(Bench, MedianOfSamples) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 3.0, 2.0}), 2.5);
}

TEST(Check, SmallSuitesPass) {
  auto cfg = parse_config(kSmallNetwork + "[check]\ninstances=10 gradient_instances=3 "
                                          "adjoint_instances=3 determinism_instances=1\n");
  const auto report = run_check_suites(cfg);
  EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(Check, ZeroToleranceFailsWithSeed) {
  auto cfg = parse_config(kSmallNetwork + "[check]\nseed=77 instances=10 gradient_instances=3 "
                                          "adjoint_instances=3 determinism_instances=1 tolerance=0\n");
  const auto report = run_check_suites(cfg);
  EXPECT_FALSE(report.passed());
  const auto text = report.summary();
  EXPECT_NE(text.find("[FAIL]"), std::string::npos);
  EXPECT_NE(text.find("seed 77"), std::string::npos);
}

TEST(Cli, ExitCodes) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto bad = temp_path("bad.conf");
  std::ofstream(bad) << "[input]\nbatch=1 size=5 pose=1x2x2\n[layer.1]\nk=3 stride=0 in_ch=1 out_ch=1 pose=1x2x2\n";
  EXPECT_EQ(run_cli("check --config " + bad.string()), 2);
  EXPECT_EQ(run_cli("bench --config /nonexistent/file.conf"), 3);
  EXPECT_EQ(run_cli("bench --engine gpu"), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);

  const auto small = temp_path("small.conf");
  std::ofstream(small) << kSmallNetwork << "[check]\ninstances=5 gradient_instances=2 adjoint_instances=2 "
                                           "determinism_instances=1\n";
  EXPECT_EQ(run_cli("check --config " + small.string()), 0);
  const auto failing = temp_path("failing.conf");
  std::ofstream(failing) << kSmallNetwork << "[check]\ninstances=5 gradient_instances=2 adjoint_instances=2 "
                                             "determinism_instances=1 tolerance=0\n";
  EXPECT_EQ(run_cli("check --config " + failing.string()), 1);

  const auto csv = temp_path("bench.csv");
  EXPECT_EQ(run_cli("bench --config " + small.string() + " --reps 3 --workers 2 --scalar f64 --seed 5 --csv " +
                    csv.string()),
            0);
  const auto rows = parse_csv(read_file(csv));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].engine, "naive");
  EXPECT_EQ(run_cli("bench --config " + small.string() + " --csv /nonexistent-dir/out.csv"), 3);
  for (const auto& p : {bad, small, failing, csv}) std::filesystem::remove(p);
}

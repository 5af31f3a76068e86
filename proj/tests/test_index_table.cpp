#include <gtest/gtest.h>

#include <algorithm>
#include <tuple>
#include <vector>

#include "capsconv/index_table.hpp"
#include "capsconv/random.hpp"
#include "oracles.hpp"

using namespace capsconv;

namespace {

const ExecPolicy kReference{3, AccumulationMode::reference};
const ExecPolicy kOptimized{3, AccumulationMode::optimized};

/// Scalar (input element, kernel element, output element) products from a plain loop nest.
std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> loop_nest_tasks(const ConvGeometry& g) {
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> tasks;
  const std::size_t S = g.slices, M = g.rows, K = g.inner, N = g.cols;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t p = 0; p < g.out_channels; ++p)
      for (std::size_t i = 0; i < g.out_height; ++i)
        for (std::size_t j = 0; j < g.out_width; ++j)
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t r = 0; r < g.k_h; ++r)
              for (std::size_t q = 0; q < g.k_w; ++q) {
                const long y = long(i * g.cfg.stride + r) - long(g.cfg.padding);
                const long x = long(j * g.cfg.stride + q) - long(g.cfg.padding);
                if (y < 0 || x < 0 || y >= long(g.height) || x >= long(g.width)) continue;
                const std::size_t in = (((b * g.in_channels + c) * g.height + y) * g.width + x) * S * M * K;
                const std::size_t w = (((p * g.in_channels + c) * g.k_h + r) * g.k_w + q) * S * K * N;
                const std::size_t o = (((b * g.out_channels + p) * g.out_height + i) * g.out_width + j) * S * M * N;
                for (std::size_t s = 0; s < S; ++s)
                  for (std::size_t m = 0; m < M; ++m)
                    for (std::size_t n = 0; n < N; ++n)
                      for (std::size_t k = 0; k < K; ++k)
                        tasks.emplace_back(in + (s * M + m) * K + k, w + (s * K + k) * N + n,
                                           o + (s * M + m) * N + n);
              }
  std::sort(tasks.begin(), tasks.end());
  return tasks;
}

/// The same expansion driven by the table's pose triples.
std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> table_tasks(const IndexTable& t) {
  const auto& g = t.geometry;
  const std::size_t S = g.slices, M = g.rows, K = g.inner, N = g.cols;
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> tasks;
  for (const auto& tr : t.triples)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < K; ++k)
            tasks.emplace_back(tr.input + (s * M + m) * K + k, tr.weight + (s * K + k) * N + n,
                               tr.output + (s * M + m) * N + n);
  std::sort(tasks.begin(), tasks.end());
  return tasks;
}

}  // namespace

TEST(IndexTable, SinglePose) {
  const auto t = build_index_table(make_geometry(1, 1, 1, 1, {1, 2, 2}, 1, 1, 1, {1, 2, 2}, {}));
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t.triples[0], (IndexTriple{0, 0, 0}));
}

TEST(IndexTable, GoldenWindowCount) {
  const auto t = build_index_table(make_geometry(1, 1, 5, 5, {3, 3, 3}, 1, 4, 4, {3, 3, 3}, {}));
  EXPECT_EQ(t.size(), 64u);
  EXPECT_EQ(t.output_starts.size(), 5u);
}

TEST(IndexTable, TotalityAndBounds) {
  for (std::size_t n = 0; n < 100; ++n) {
    const auto pb = random_problem<double>(2021, n);
    const auto g = make_geometry(pb.input, pb.kernel, pb.shape.cfg);
    const auto t = build_index_table(g);
    const std::size_t in_pose = g.input_pose().size(), k_pose = g.kernel_pose().size(),
                      o_pose = g.output_pose().size();
    std::vector<bool> covered(g.batch * g.out_channels * g.positions(), false);
    for (const auto& tr : t.triples) {
      ASSERT_LE(tr.input + in_pose, pb.input.size());
      ASSERT_LE(tr.weight + k_pose, pb.kernel.size());
      ASSERT_LT(tr.output / o_pose, covered.size());
      covered[tr.output / o_pose] = true;
    }
    if (g.cfg.padding < g.k_h && g.cfg.padding < g.k_w) {
      EXPECT_TRUE(std::all_of(covered.begin(), covered.end(), [](bool c) { return c; }));
    }
    ASSERT_EQ(table_tasks(t), loop_nest_tasks(g)) << "instance " << n;

    auto sorted = [](std::vector<IndexTriple> v) {
      std::sort(v.begin(), v.end(), [](const IndexTriple& a, const IndexTriple& b) {
        return std::tie(a.input, a.weight, a.output) < std::tie(b.input, b.weight, b.output);
      });
      return v;
    };
    EXPECT_EQ(sorted(t.by_weight), sorted(t.triples));
    EXPECT_EQ(sorted(t.by_input), sorted(t.triples));
  }
}

TEST(IndexedForward, GoldenWindowAndZeros) {
  CapsuleTensor<double> in(1, 1, 5, 5, {3, 3, 3}, std::vector<double>(675, 1.0));
  ConvKernel<double> k(1, 1, 4, 4, {3, 3, 3}, std::vector<double>(432, 1.0));
  const auto t = build_index_table(in, k, {});
  for (const auto& policy : {kReference, kOptimized}) {
    const auto out = indexed_forward(in, k, t, policy);
    for (double v : out.data()) ASSERT_EQ(v, 48.0);
    const auto zero = indexed_forward(CapsuleTensor<double>(1, 1, 5, 5, {3, 3, 3}), k, t, policy);
    for (double v : zero.data()) ASSERT_EQ(v, 0.0);
  }
}

TEST(IndexedForward, MatchesNaive) {
  for (std::size_t n = 0; n < 100; ++n) {
    const auto pb = random_problem<double>(2021, n);
    const auto& cfg = pb.shape.cfg;
    const auto t = build_index_table(pb.input, pb.kernel, cfg);
    const auto expected = naive_forward(pb.input, pb.kernel, cfg);
    ASSERT_EQ(indexed_forward(pb.input, pb.kernel, t, kReference), expected) << "instance " << n;
    ASSERT_LE(oracle::max_relative(indexed_forward(pb.input, pb.kernel, t, kOptimized).data(),
                                   expected.data()),
              1e-9);
  }
}

TEST(IndexedForward, RejectsForeignTable) {
  const auto a = random_problem<double>(1, 0);
  const auto b = random_problem<double>(1, 1);
  const auto t = build_index_table(b.input, b.kernel, b.shape.cfg);
  ASSERT_FALSE(make_geometry(a.input, a.kernel, a.shape.cfg) == t.geometry);
  EXPECT_THROW(indexed_forward(a.input, a.kernel, t), ShapeError);
}

TEST(IndexedBackward, MatchesNaive) {
  for (std::size_t n = 0; n < 50; ++n) {
    const auto pb = random_problem<double>(606, n);
    const auto& cfg = pb.shape.cfg;
    const auto t = build_index_table(pb.input, pb.kernel, cfg);
    const auto dout = naive_forward(pb.input, pb.kernel, cfg);
    const auto expected = naive_backward(pb.input, pb.kernel, dout, cfg);
    const auto ref = indexed_backward(pb.input, pb.kernel, dout, t, kReference);
    ASSERT_EQ(ref.kernel, expected.kernel) << "instance " << n;
    ASSERT_LE(oracle::max_relative(ref.input.data(), expected.input.data()), 1e-12);
    const auto opt = indexed_backward(pb.input, pb.kernel, dout, t, kOptimized);
    ASSERT_LE(oracle::max_relative(opt.kernel.data(), expected.kernel.data()), 1e-9);
    ASSERT_LE(oracle::max_relative(opt.input.data(), expected.input.data()), 1e-9);
  }
}

TEST(Indexed, DeterministicAcrossWorkerCounts) {
  for (std::size_t n = 0; n < 10; ++n) {
    const auto pb = random_problem<double>(72, n);
    const auto& cfg = pb.shape.cfg;
    const auto t = build_index_table(pb.input, pb.kernel, cfg);
    const auto dout = naive_forward(pb.input, pb.kernel, cfg);
    for (auto mode : {AccumulationMode::reference, AccumulationMode::optimized}) {
      const auto out1 = indexed_forward(pb.input, pb.kernel, t, {1, mode});
      const auto grad1 = indexed_backward(pb.input, pb.kernel, dout, t, {1, mode});
      for (std::size_t w : {2u, 8u}) {
        ASSERT_EQ(indexed_forward(pb.input, pb.kernel, t, {w, mode}), out1);
        const auto grad = indexed_backward(pb.input, pb.kernel, dout, t, {w, mode});
        ASSERT_EQ(grad.input, grad1.input);
        ASSERT_EQ(grad.kernel, grad1.kernel);
      }
    }
  }
}

#include <gtest/gtest.h>

#include <vector>

#include "capsconv/random.hpp"
#include "capsconv/reference.hpp"
#include "oracles.hpp"

using namespace capsconv;

namespace {

oracle::Shape shape_of(const ProblemShape& p) {
  return {p.batch,      p.in_channels,      p.out_channels,    p.height,
          p.width,      p.k_h,              p.k_w,             p.input_pose.slices,
          p.input_pose.rows, p.input_pose.cols, p.cols,        p.cfg.stride,
          p.cfg.padding};
}

std::vector<double> to_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(NaiveForward, AllOnesGoldenWindow) {
  CapsuleTensor<double> in(1, 1, 5, 5, {3, 3, 3}, std::vector<double>(675, 1.0));
  ConvKernel<double> k(1, 1, 4, 4, {3, 3, 3}, std::vector<double>(432, 1.0));
  const auto out = naive_forward(in, k, {});
  EXPECT_EQ(out.shape(), (std::array<std::size_t, 7>{1, 1, 2, 2, 3, 3, 3}));
  for (double v : out.data()) ASSERT_EQ(v, 48.0);
}

TEST(NaiveForward, ZeroKernelGivesZeros) {
  const auto pb = random_problem<double>(1, 0);
  ConvKernel<double> zero(pb.kernel.out_channels(), pb.kernel.in_channels(), pb.kernel.k_h(),
                          pb.kernel.k_w(), pb.kernel.pose());
  const auto out = naive_forward(pb.input, zero, pb.shape.cfg);
  for (double v : out.data()) ASSERT_EQ(v, 0.0);
}

TEST(NaiveForward, IdentityKernelCopiesInput) {
  Rng rng(2);
  CapsuleTensor<double> in(2, 1, 3, 4, {2, 3, 3});
  fill_uniform(in.data(), rng);
  ConvKernel<double> id(1, 1, 1, 1, {2, 3, 3});
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t d = 0; d < 3; ++d) id.data()[s * 9 + d * 3 + d] = 1.0;
  EXPECT_EQ(naive_forward(in, id, {}), in);
}

TEST(NaiveForward, MatchesSixDeepBruteForce) {
  const oracle::Shape s{2, 2, 3, 4, 4, 2, 2, 1, 2, 2, 2, 1, 0};
  Rng rng(99);
  CapsuleTensor<double> in(s.B, s.C, s.H, s.W, {s.S, s.M, s.K});
  ConvKernel<double> k(s.Cp, s.C, s.kh, s.kw, {s.S, s.K, s.N});
  fill_uniform(in.data(), rng);
  fill_uniform(k.data(), rng);
  const auto expected = oracle::brute_force_forward(s, to_vector(in.data()), to_vector(k.data()));
  EXPECT_LE(oracle::max_relative(naive_forward(in, k, {}).data(), expected), 1e-14);
}

TEST(NaiveForward, MatchesBruteForceOnRandomShapes) {
  for (std::size_t n = 0; n < 30; ++n) {
    const auto pb = random_problem<double>(7, n);
    const auto expected = oracle::brute_force_forward(shape_of(pb.shape), to_vector(pb.input.data()),
                                                      to_vector(pb.kernel.data()));
    ASSERT_LE(oracle::max_relative(naive_forward(pb.input, pb.kernel, pb.shape.cfg).data(), expected),
              1e-13)
        << "instance " << n;
  }
}

TEST(NaiveForward, DegenerateScalarPosesMatchScalarConvolutionBitwise) {
  Rng rng(2024);
  for (int n = 0; n < 60; ++n) {
    const std::size_t B = rng.integer(1, 2), C = rng.integer(1, 3), Cp = rng.integer(1, 3);
    const std::size_t H = rng.integer(3, 8), W = rng.integer(3, 8), k = rng.integer(1, 3);
    const ConvConfig cfg{rng.integer(1, 2), rng.integer(0, 1)};
    CapsuleTensor<double> in(B, C, H, W, {1, 1, 1});
    ConvKernel<double> ker(Cp, C, k, k, {1, 1, 1});
    fill_uniform(in.data(), rng);
    fill_uniform(ker.data(), rng);
    const auto expected = oracle::scalar_convolution(B, C, H, W, in.storage(), Cp, k, k,
                                                     ker.storage(), cfg.stride, cfg.padding);
    ASSERT_EQ(naive_forward(in, ker, cfg).storage(), expected) << "instance " << n;
  }
}

TEST(NaiveForward, Linearity) {
  const auto pb = random_problem<double>(3, 4);
  const auto& cfg = pb.shape.cfg;
  const auto base = naive_forward(pb.input, pb.kernel, cfg);
  for (double a : {-1.0, 0.5, 3.0}) {
    auto in = pb.input;
    auto k = pb.kernel;
    for (auto& v : in.data()) v *= a;
    for (auto& v : k.data()) v *= a;
    auto expect = to_vector(base.data());
    for (auto& v : expect) v *= a;
    EXPECT_LE(oracle::max_relative(naive_forward(in, pb.kernel, cfg).data(), expect), 1e-12);
    EXPECT_LE(oracle::max_relative(naive_forward(pb.input, k, cfg).data(), expect), 1e-12);
  }
  auto k2 = random_problem<double>(3, 4).kernel;
  Rng rng(8);
  fill_uniform(k2.data(), rng);
  auto sum = pb.kernel;
  for (std::size_t e = 0; e < sum.size(); ++e) sum.data()[e] += k2.data()[e];
  auto expect = to_vector(base.data());
  const auto other = naive_forward(pb.input, k2, cfg);
  for (std::size_t e = 0; e < expect.size(); ++e) expect[e] += other.data()[e];
  EXPECT_LE(oracle::max_relative(naive_forward(pb.input, sum, cfg).data(), expect), 1e-12);
}

TEST(NaiveForward, RejectsNonFiniteInput) {
  auto pb = random_problem<double>(1, 1);
  pb.input.storage()[0] = NAN;
  EXPECT_THROW(naive_forward(pb.input, pb.kernel, pb.shape.cfg), NonFiniteError);
}

TEST(NaiveBackward, GoldenWindowKernelGradient) {
  CapsuleTensor<double> in(1, 1, 5, 5, {3, 3, 3}, std::vector<double>(675, 1.0));
  ConvKernel<double> k(1, 1, 4, 4, {3, 3, 3}, std::vector<double>(432, 1.0));
  CapsuleTensor<double> ones(1, 1, 2, 2, {3, 3, 3}, std::vector<double>(108, 1.0));
  const auto grads = naive_backward(in, k, ones, {});
  for (double v : grads.kernel.data()) ASSERT_EQ(v, 12.0);

  // The same value from differences of the linear functional <O, 1>.
  const auto fd = oracle::central_differences(
      [&](const std::vector<double>& kv) {
        ConvKernel<double> probe(1, 1, 4, 4, {3, 3, 3}, kv);
        double total = 0;
        const auto out = naive_forward(in, probe, {});
        for (double v : out.data()) total += v;
        return total;
      },
      k.storage(), 1e-5);
  EXPECT_LE(oracle::max_relative(fd, grads.kernel.storage()), 1e-7);
}

TEST(NaiveBackward, ZeroGradientGivesZeros) {
  const auto pb = random_problem<double>(5, 2);
  const auto out = naive_forward(pb.input, pb.kernel, pb.shape.cfg);
  CapsuleTensor<double> zero(out.batch(), out.channels(), out.height(), out.width(), out.pose());
  const auto g = naive_backward(pb.input, pb.kernel, zero, pb.shape.cfg);
  for (double v : g.input.data()) ASSERT_EQ(v, 0.0);
  for (double v : g.kernel.data()) ASSERT_EQ(v, 0.0);
}

TEST(NaiveBackward, MatchesCentralDifferences) {
  for (std::size_t n = 0; n < 20; ++n) {
    const auto pb = random_small_problem<double>(31, n);
    const auto& cfg = pb.shape.cfg;
    const auto out = naive_forward(pb.input, pb.kernel, cfg);
    const auto grads = naive_backward(pb.input, pb.kernel, out, cfg);
    const auto s = shape_of(pb.shape);
    const auto fd_k = oracle::central_differences(
        [&](const std::vector<double>& kv) {
          return oracle::half_sum_squares(oracle::brute_force_forward(s, pb.input.storage(), kv));
        },
        pb.kernel.storage(), 1e-5);
    const auto fd_x = oracle::central_differences(
        [&](const std::vector<double>& xv) {
          return oracle::half_sum_squares(oracle::brute_force_forward(s, xv, pb.kernel.storage()));
        },
        pb.input.storage(), 1e-5);
    EXPECT_LE(oracle::max_relative(grads.kernel.data(), fd_k), 1e-6) << "instance " << n;
    EXPECT_LE(oracle::max_relative(grads.input.data(), fd_x), 1e-6) << "instance " << n;
  }
}

TEST(NaiveBackward, RejectsMisshapenGradient) {
  const auto pb = random_problem<double>(5, 3);
  CapsuleTensor<double> wrong(1, 1, 1, 1, {1, 1, 1});
  EXPECT_THROW(naive_backward(pb.input, pb.kernel, wrong, pb.shape.cfg), ShapeError);
}

TEST(FiniteDiff, Quadratic) {
  const std::vector<double> x{1.0, 2.0};
  const auto g = finite_diff_grad<double>(
      [](std::span<const double> v) { return v[0] * v[0] + v[1] * v[1]; }, x, 1e-5);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
  const auto z = finite_diff_grad<double>([](std::span<const double>) { return 7.0; }, x, 1e-5);
  EXPECT_EQ(z, (std::vector<double>{0.0, 0.0}));
  EXPECT_THROW(finite_diff_grad<double>([](std::span<const double>) { return 0.0; }, x, 0.0),
               Error);
}

TEST(FiniteDiff, TwentyParameterKernelMatchesBackward) {
  // C'=1, C=1, 2x2 taps, pose 1x1x5 -> 20 kernel scalars.
  Rng rng(77);
  CapsuleTensor<double> in(1, 1, 4, 4, {1, 2, 1});
  ConvKernel<double> k(1, 1, 2, 2, {1, 1, 5});
  fill_uniform(in.data(), rng);
  fill_uniform(k.data(), rng);
  ASSERT_EQ(k.size(), 20u);
  const auto fd = finite_diff_grad<double>(
      [&](std::span<const double> kv) {
        ConvKernel<double> probe(1, 1, 2, 2, {1, 1, 5}, {kv.begin(), kv.end()});
        return half_squared_norm<double>(naive_forward(in, probe, {}).data());
      },
      k.data(), 1e-5);
  const auto out = naive_forward(in, k, {});
  EXPECT_LE(oracle::max_relative(naive_backward(in, k, out, {}).kernel.data(), fd), 1e-6);
}

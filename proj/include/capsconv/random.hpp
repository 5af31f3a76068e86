#pragma once

// Seeded problem generation. Values come from mt19937_64 with an explicit
// 53-bit conversion, so the same seed gives the same tensors on any platform.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "capsconv/tensor.hpp"

namespace capsconv {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  std::size_t integer(std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(engine_() % (hi - lo + 1));
  }

  template <typename U>
  const U& pick(std::span<const U> choices) {
    return choices[integer(0, choices.size() - 1)];
  }

  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

template <Scalar T>
void fill_uniform(std::span<T> values, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : values) v = static_cast<T>(rng.uniform(lo, hi));
}

/// Shape of one convolution problem.
struct ProblemShape {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t k_h = 1;
  std::size_t k_w = 1;
  PoseDims input_pose{};   // (S, M, K)
  std::size_t cols = 1;    // N
  ConvConfig cfg{};

  PoseDims kernel_pose() const { return {input_pose.slices, input_pose.cols, cols}; }
};

/// Draws a shape from the randomized oracle suite: B in {1,2}, C and C' in {1,2,3},
/// H and W in 3..8, square kernels 1..3, stride {1,2}, padding {0,1}, S in {1,3},
/// M, K, N in 1..4.
inline ProblemShape random_problem_shape(Rng& rng) {
  static constexpr std::size_t kSlices[] = {1, 3};
  ProblemShape s;
  s.batch = rng.integer(1, 2);
  s.in_channels = rng.integer(1, 3);
  s.out_channels = rng.integer(1, 3);
  s.height = rng.integer(3, 8);
  s.width = rng.integer(3, 8);
  s.k_h = s.k_w = rng.integer(1, 3);
  s.cfg.stride = rng.integer(1, 2);
  s.cfg.padding = rng.integer(0, 1);
  s.input_pose.slices = rng.pick<std::size_t>(kSlices);
  s.input_pose.rows = rng.integer(1, 4);
  s.input_pose.cols = rng.integer(1, 4);
  s.cols = rng.integer(1, 4);
  return s;
}

/// Smaller shapes for finite-difference checks, where every parameter costs two
/// forward passes: B in {1,2}, C and C' in {1,2}, H and W in 3..5, S in {1,2},
/// M, K, N in 1..3; kernel, stride and padding ranges as above.
inline ProblemShape random_small_problem_shape(Rng& rng) {
  ProblemShape s;
  s.batch = rng.integer(1, 2);
  s.in_channels = rng.integer(1, 2);
  s.out_channels = rng.integer(1, 2);
  s.height = rng.integer(3, 5);
  s.width = rng.integer(3, 5);
  s.k_h = s.k_w = rng.integer(1, 3);
  s.cfg.stride = rng.integer(1, 2);
  s.cfg.padding = rng.integer(0, 1);
  s.input_pose.slices = rng.integer(1, 2);
  s.input_pose.rows = rng.integer(1, 3);
  s.input_pose.cols = rng.integer(1, 3);
  s.cols = rng.integer(1, 3);
  return s;
}

template <Scalar T>
struct Problem {
  ProblemShape shape;
  CapsuleTensor<T> input;
  ConvKernel<T> kernel;
};

template <Scalar T>
Problem<T> make_problem(const ProblemShape& shape, Rng& rng) {
  Problem<T> problem{shape,
                     CapsuleTensor<T>(shape.batch, shape.in_channels, shape.height, shape.width,
                                      shape.input_pose),
                     ConvKernel<T>(shape.out_channels, shape.in_channels, shape.k_h, shape.k_w,
                                   shape.kernel_pose())};
  fill_uniform(problem.input.data(), rng);
  fill_uniform(problem.kernel.data(), rng);
  return problem;
}

inline std::uint64_t instance_seed(std::uint64_t seed, std::size_t index) {
  return seed * 0x9E3779B97F4A7C15ull + index;
}

/// Problem `index` of the randomized suite rooted at `seed`; each instance has its own stream.
template <Scalar T>
Problem<T> random_problem(std::uint64_t seed, std::size_t index) {
  Rng rng(instance_seed(seed, index));
  const auto shape = random_problem_shape(rng);
  return make_problem<T>(shape, rng);
}

template <Scalar T>
Problem<T> random_small_problem(std::uint64_t seed, std::size_t index) {
  Rng rng(instance_seed(seed, index) ^ 0x5DEECE66Dull);
  const auto shape = random_small_problem_shape(rng);
  return make_problem<T>(shape, rng);
}

}  // namespace capsconv

#pragma once

// Naive loop-nest capsule convolution. This is the correctness oracle for the
// accelerated engines, so it stays single-threaded and literal.

#include <algorithm>
#include <array>
#include <concepts>
#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "capsconv/tensor.hpp"

namespace capsconv {

template <Scalar T>
struct ConvGradients {
  CapsuleTensor<T> input;
  ConvKernel<T> kernel;
};

template <Scalar T>
CapsuleTensor<T> naive_forward(const CapsuleTensor<T>& input, const ConvKernel<T>& kernel,
                               const ConvConfig& cfg) {
  const ConvGeometry g = make_geometry(input, kernel, cfg);
  require_finite(input.data(), "input");
  require_finite(kernel.data(), "kernel");
  auto out = make_output<T>(g);
  const PoseDims in_pose = g.input_pose(), k_pose = g.kernel_pose();

  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t p = 0; p < g.out_channels; ++p)
      for (std::size_t i = 0; i < g.out_height; ++i)
        for (std::size_t j = 0; j < g.out_width; ++j) {
          auto acc = out.pose_at(b, p, i, j);
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t kr = 0; kr < g.k_h; ++kr) {
              const auto y = g.source_row(i, kr);
              if (y < 0) continue;
              for (std::size_t kc = 0; kc < g.k_w; ++kc) {
                const auto x = g.source_col(j, kc);
                if (x < 0) continue;
                pose_matmul_accumulate(input.pose_at(b, c, y, x), in_pose,
                                       kernel.pose_at(p, c, kr, kc), k_pose, acc);
              }
            }
        }
  return out;
}

template <Scalar T>
void check_output_gradient(const ConvGeometry& g, const CapsuleTensor<T>& grad_output) {
  const std::array<std::size_t, 7> expected{g.batch,  g.out_channels, g.out_height, g.out_width,
                                            g.slices, g.rows,         g.cols};
  if (grad_output.shape() != expected)
    throw ShapeError("output gradient shape does not match the forward output shape");
  require_finite(grad_output.data(), "output gradient");
}

/// Adjoint of naive_forward with respect to both the input and the kernel.
///
/// Kernel gradients sum I^T * dO over (b, i, j) ascending. Input gradients are
/// scattered window by window in (i, j) order, each window's column first
/// summed over output channels.
template <Scalar T>
ConvGradients<T> naive_backward(const CapsuleTensor<T>& input, const ConvKernel<T>& kernel,
                                const CapsuleTensor<T>& grad_output, const ConvConfig& cfg) {
  const ConvGeometry g = make_geometry(input, kernel, cfg);
  require_finite(input.data(), "input");
  require_finite(kernel.data(), "kernel");
  check_output_gradient(g, grad_output);

  ConvGradients<T> grads{
      CapsuleTensor<T>(g.batch, g.in_channels, g.height, g.width, g.input_pose()),
      ConvKernel<T>(g.out_channels, g.in_channels, g.k_h, g.k_w, g.kernel_pose())};
  const PoseDims in_t{g.slices, g.inner, g.rows};    // I^T
  const PoseDims dout{g.slices, g.rows, g.cols};     // dO
  const PoseDims ker_t{g.slices, g.cols, g.inner};   // K^T
  std::vector<T> transposed(std::max(in_t.size(), ker_t.size()));

  for (std::size_t p = 0; p < g.out_channels; ++p)
    for (std::size_t c = 0; c < g.in_channels; ++c)
      for (std::size_t kr = 0; kr < g.k_h; ++kr)
        for (std::size_t kc = 0; kc < g.k_w; ++kc) {
          auto acc = grads.kernel.pose_at(p, c, kr, kc);
          auto it = std::span<T>(transposed).first(in_t.size());
          for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t i = 0; i < g.out_height; ++i) {
              const auto y = g.source_row(i, kr);
              if (y < 0) continue;
              for (std::size_t j = 0; j < g.out_width; ++j) {
                const auto x = g.source_col(j, kc);
                if (x < 0) continue;
                transpose_pose(input.pose_at(b, c, y, x), g.input_pose(), it);
                pose_matmul_accumulate<T>(it, in_t, grad_output.pose_at(b, p, i, j), dout, acc);
              }
            }
        }

  std::vector<T> column(g.input_pose().size());
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t i = 0; i < g.out_height; ++i)
      for (std::size_t j = 0; j < g.out_width; ++j)
        for (std::size_t c = 0; c < g.in_channels; ++c)
          for (std::size_t kr = 0; kr < g.k_h; ++kr) {
            const auto y = g.source_row(i, kr);
            if (y < 0) continue;
            for (std::size_t kc = 0; kc < g.k_w; ++kc) {
              const auto x = g.source_col(j, kc);
              if (x < 0) continue;
              std::fill(column.begin(), column.end(), T(0));
              auto kt = std::span<T>(transposed).first(ker_t.size());
              for (std::size_t p = 0; p < g.out_channels; ++p) {
                transpose_pose(kernel.pose_at(p, c, kr, kc), g.kernel_pose(), kt);
                pose_matmul_accumulate<T>(grad_output.pose_at(b, p, i, j), dout, kt, ker_t,
                                          column);
              }
              auto dst = grads.input.pose_at(b, c, y, x);
              for (std::size_t e = 0; e < column.size(); ++e) dst[e] += column[e];
            }
          }
  return grads;
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
template <Scalar T, typename Loss>
  requires std::invocable<Loss&, std::span<const T>>
std::vector<T> finite_diff_grad(Loss&& loss, std::span<const T> x, T h) {
  if (!(h > T(0))) throw Error("finite_diff_grad: step must be positive");
  std::vector<T> point(x.begin(), x.end());
  std::vector<T> grad(x.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const T saved = point[i];
    point[i] = saved + h;
    const T up = static_cast<T>(loss(std::span<const T>(point)));
    point[i] = saved - h;
    const T down = static_cast<T>(loss(std::span<const T>(point)));
    point[i] = saved;
    grad[i] = (up - down) / (T(2) * h);
  }
  return grad;
}

/// L = sum(O^2) / 2, whose output gradient is O itself.
template <Scalar T>
T half_squared_norm(std::span<const T> values) {
  T total = 0;
  for (T v : values) total += v * v;
  return total / T(2);
}

}  // namespace capsconv

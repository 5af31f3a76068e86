#pragma once

// Capsule convolution lowered to strided batched small-matrix multiplication.
//
// Forward:  im2col -> input_extend -> kernel_extend -> batched_matmul -> output_reduce
// Backward: output_extend, two batched products against transposed blocks,
//           kernel_grad_reduce, input_reduce and col2im.
//
// Every batch is addressed by the 5-axis index (out channel p, batch item b,
// output position, kernel tap q, pose slice s), with q = (c * kh + kr) * kw + kc.
// Stage buffers use the same axis order:
//
//   FlattenedInput    [b][pos][q][s][M][K]          one contiguous column per (b, pos)
//   ExtendedInput     [p][b][pos][q][s][M][K]       C' replicas of FlattenedInput
//   ExtendedKernel    [p][pos][q][s][K][N]          H'W' repeats of each out channel
//   ExtendedGradient  [p][b][pos][q][s][M][N]       dO pose slice repeated over taps
//   BatchProduct      [p][b][pos][q][s][rows][cols]
//
// In reference mode every stage is materialized and each product entry is an
// ascending dot product added into a zero-initialized accumulator, so results are
// bitwise equal to naive_forward / naive_backward. Optimized mode reads the same
// operands through zero-copy strided views and fuses each product with its reduction.

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "capsconv/parallel.hpp"
#include "capsconv/reference.hpp"
#include "capsconv/tensor.hpp"

namespace capsconv {

template <Scalar T>
struct FlattenedInput {
  ConvGeometry geometry;
  std::vector<T> data;

  std::size_t columns() const noexcept { return geometry.batch * geometry.positions(); }
  std::size_t column_length() const noexcept { return geometry.column_length(); }
  std::span<const T> column(std::size_t b, std::size_t pos) const {
    return std::span<const T>(data).subspan((b * geometry.positions() + pos) * column_length(),
                                            column_length());
  }
};

template <Scalar T>
struct ExtendedInput {
  ConvGeometry geometry;
  std::size_t replicas = 0;
  std::vector<T> data;

  std::size_t replica_size() const noexcept {
    return geometry.batch * geometry.positions() * geometry.column_length();
  }
  std::span<const T> replica(std::size_t r) const {
    return std::span<const T>(data).subspan(r * replica_size(), replica_size());
  }
};

template <Scalar T>
struct ExtendedKernel {
  std::size_t out_channels = 0;
  std::size_t spatial = 0;
  std::size_t block = 0;  // C * kh * kw * S * K * N
  std::vector<T> data;

  std::span<const T> repeat(std::size_t p, std::size_t pos) const {
    return std::span<const T>(data).subspan((p * spatial + pos) * block, block);
  }
};

template <Scalar T>
struct ExtendedGradient {
  ConvGeometry geometry;
  std::vector<T> data;
};

/// Addressing of a strided batch of equal-shaped products. Batch t decomposes
/// row-major over `extents`; operand offsets are the dot product of that index
/// with the operand's per-axis strides. A zero stride broadcasts an operand.
struct BatchPlan {
  static constexpr std::size_t kOutChannel = 0, kBatch = 1, kPosition = 2, kTap = 3, kSlice = 4;
  using Axes = std::array<std::size_t, 5>;

  Axes extents{};
  std::size_t m = 0, k = 0, n = 0;  // A is m x k, B is k x n
  Axes a_strides{}, b_strides{}, c_strides{};

  std::size_t batch_count() const noexcept {
    std::size_t count = 1;
    for (auto e : extents) count *= e;
    return count;
  }
  std::size_t a_stride() const noexcept { return a_strides[kSlice]; }
  std::size_t b_stride() const noexcept { return b_strides[kSlice]; }
  std::size_t c_stride() const noexcept { return c_strides[kSlice]; }

  Axes index_of(std::size_t t) const noexcept {
    Axes idx{};
    for (std::size_t d = 5; d-- > 0;) {
      idx[d] = t % extents[d];
      t /= extents[d];
    }
    return idx;
  }

  static std::size_t offset(const Axes& strides, const Axes& idx) noexcept {
    std::size_t off = 0;
    for (std::size_t d = 0; d < 5; ++d) off += strides[d] * idx[d];
    return off;
  }

  /// One past the last element any batch reads through `strides`.
  std::size_t span_of(const Axes& strides, std::size_t block) const noexcept {
    std::size_t last = 0;
    for (std::size_t d = 0; d < 5; ++d) last += strides[d] * (extents[d] - 1);
    return last + block;
  }

  static Axes dense(const Axes& extents, std::size_t block) noexcept {
    Axes s{};
    std::size_t step = block;
    for (std::size_t d = 5; d-- > 0;) {
      s[d] = step;
      step *= extents[d];
    }
    return s;
  }
};

template <Scalar T>
struct BatchProduct {
  BatchPlan plan;
  std::vector<T> data;

  std::size_t block() const noexcept { return plan.m * plan.n; }
  std::span<const T> batch(std::size_t t) const {
    return std::span<const T>(data).subspan(t * block(), block());
  }
};

namespace detail {

inline BatchPlan::Axes axes_of(const ConvGeometry& g) {
  return {g.out_channels, g.batch, g.positions(), g.taps(), g.slices};
}

/// Strides of a buffer laid out [p][b][pos][q][s][block] (materialized replicas).
inline BatchPlan::Axes replicated_strides(const ConvGeometry& g, std::size_t block) {
  return BatchPlan::dense(axes_of(g), block);
}

/// Strides of an ExtendedKernel-shaped buffer [p][pos][q][s][block]: shared across batch items.
inline BatchPlan::Axes kernel_repeat_strides(const ConvGeometry& g, std::size_t block) {
  const std::size_t tap = g.slices * block;
  const std::size_t pos = g.taps() * tap;
  return {g.positions() * pos, 0, pos, tap, block};
}

inline void require_plan_fits(const BatchPlan& plan, const BatchPlan::Axes& strides,
                              std::size_t block, std::size_t length, const char* operand) {
  if (plan.batch_count() == 0) return;
  if (plan.span_of(strides, block) > length)
    throw ShapeError(std::string("batched_matmul: plan reads past the end of operand ") + operand);
}

}  // namespace detail

inline ConvGeometry window_geometry(std::size_t batch, std::size_t channels, std::size_t height,
                                    std::size_t width, PoseDims pose, std::size_t k_h,
                                    std::size_t k_w, const ConvConfig& cfg) {
  // Window-only geometry: no output channels and an identity-shaped kernel pose.
  ConvGeometry g = make_geometry(batch, channels, height, width, pose, 0, k_h, k_w,
                                 PoseDims{pose.slices, pose.cols, pose.cols}, cfg);
  g.cols = 0;
  return g;
}

// ---------------------------------------------------------------------------
// Forward stages

/// Gathers every receptive window into one contiguous column; padding reads zero.
template <Scalar T>
void capsule_im2col_into(std::span<const T> input, const ConvGeometry& g, std::span<T> out,
                         std::size_t workers = 1) {
  const std::size_t pose = g.input_pose().size();
  const std::size_t col_len = g.column_length();
  if (input.size() != g.batch * g.in_channels * g.height * g.width * pose)
    throw ShapeError("capsule_im2col: input length does not match geometry");
  if (out.size() != g.batch * g.positions() * col_len)
    throw ShapeError("capsule_im2col: output length does not match geometry");

  parallel_for(g.batch * g.positions(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t column = begin; column < end; ++column) {
      const std::size_t b = column / g.positions();
      const std::size_t pos = column % g.positions();
      const std::size_t i = pos / g.out_width, j = pos % g.out_width;
      T* dst = out.data() + column * col_len;
      for (std::size_t c = 0; c < g.in_channels; ++c)
        for (std::size_t kr = 0; kr < g.k_h; ++kr) {
          const auto y = g.source_row(i, kr);
          for (std::size_t kc = 0; kc < g.k_w; ++kc, dst += pose) {
            const auto x = g.source_col(j, kc);
            if (y < 0 || x < 0) {
              std::fill_n(dst, pose, T(0));
              continue;
            }
            const std::size_t src = ((b * g.in_channels + c) * g.height + static_cast<std::size_t>(y)) *
                                        g.width + static_cast<std::size_t>(x);
            std::copy_n(input.data() + src * pose, pose, dst);
          }
        }
    }
  });
}

namespace detail {

template <Scalar T>
void require_input_matches(const CapsuleTensor<T>& input, const ConvGeometry& g) {
  if (input.batch() != g.batch || input.channels() != g.in_channels ||
      input.height() != g.height || input.width() != g.width || input.pose() != g.input_pose())
    throw ShapeError("input tensor does not match convolution geometry");
}

}  // namespace detail

template <Scalar T>
FlattenedInput<T> capsule_im2col(const CapsuleTensor<T>& input, const ConvGeometry& g,
                                 std::size_t workers = 1) {
  detail::require_input_matches(input, g);
  FlattenedInput<T> f{g, std::vector<T>(g.batch * g.positions() * g.column_length())};
  capsule_im2col_into<T>(input.data(), g, f.data, workers);
  return f;
}

template <Scalar T>
FlattenedInput<T> capsule_im2col(const CapsuleTensor<T>& input, std::size_t k_h,
                                 std::size_t k_w, const ConvConfig& cfg) {
  const auto g = window_geometry(input.batch(), input.channels(), input.height(), input.width(),
                                 input.pose(), k_h, k_w, cfg);
  return capsule_im2col(input, g);
}

template <Scalar T>
void input_extend_into(std::span<const T> flattened, std::size_t replicas, std::span<T> out) {
  if (out.size() != flattened.size() * replicas)
    throw ShapeError("input_extend: output length must be replicas * input length");
  for (std::size_t r = 0; r < replicas; ++r)
    std::copy(flattened.begin(), flattened.end(), out.begin() + r * flattened.size());
}

template <Scalar T>
ExtendedInput<T> input_extend(const FlattenedInput<T>& flattened, std::size_t out_channels) {
  ExtendedInput<T> e{flattened.geometry, out_channels,
                     std::vector<T>(flattened.data.size() * out_channels)};
  e.geometry.out_channels = out_channels;
  input_extend_into<T>(flattened.data, out_channels, e.data);
  return e;
}

/// Repeats each out channel's column of kernel poses `spatial` times: (A, B) -> (A, A, B, B).
template <Scalar T>
void kernel_extend_into(std::span<const T> kernel, std::size_t out_channels,
                        std::size_t spatial, std::span<T> out) {
  if (out_channels == 0 || kernel.size() % out_channels != 0)
    throw ShapeError("kernel_extend: kernel length not divisible by out channels");
  const std::size_t block = kernel.size() / out_channels;
  if (out.size() != kernel.size() * spatial)
    throw ShapeError("kernel_extend: output length must be spatial * kernel length");
  T* dst = out.data();
  for (std::size_t p = 0; p < out_channels; ++p)
    for (std::size_t pos = 0; pos < spatial; ++pos, dst += block)
      std::copy_n(kernel.data() + p * block, block, dst);
}

template <Scalar T>
ExtendedKernel<T> kernel_extend(const ConvKernel<T>& kernel, std::size_t spatial) {
  const std::size_t block = kernel.out_channels() == 0 ? 0 : kernel.size() / kernel.out_channels();
  ExtendedKernel<T> e{kernel.out_channels(), spatial, block,
                      std::vector<T>(kernel.size() * spatial)};
  kernel_extend_into<T>(kernel.data(), kernel.out_channels(), spatial, e.data);
  return e;
}

/// Plan for O' = K' x I' over materialized ExtendedInput and ExtendedKernel.
inline BatchPlan make_forward_plan(const ConvGeometry& g) {
  BatchPlan plan;
  plan.extents = detail::axes_of(g);
  plan.m = g.rows;
  plan.k = g.inner;
  plan.n = g.cols;
  plan.a_strides = detail::replicated_strides(g, g.rows * g.inner);
  plan.b_strides = detail::kernel_repeat_strides(g, g.inner * g.cols);
  plan.c_strides = BatchPlan::dense(plan.extents, g.rows * g.cols);
  return plan;
}

/// Same batches as make_forward_plan, read directly from FlattenedInput and the raw
/// kernel: replica axes become zero strides.
inline BatchPlan make_forward_view_plan(const ConvGeometry& g) {
  BatchPlan plan = make_forward_plan(g);
  const std::size_t a_block = g.rows * g.inner, b_block = g.inner * g.cols;
  plan.a_strides = {0, g.positions() * g.column_length(), g.column_length(),
                    g.slices * a_block, a_block};
  plan.b_strides = {g.taps() * g.slices * b_block, 0, 0, g.slices * b_block, b_block};
  return plan;
}

/// C_t = A_t * B_t for every batch t of the plan.
template <Scalar T>
BatchProduct<T> batched_matmul(std::span<const T> a, std::span<const T> b,
                               const BatchPlan& plan, std::size_t workers = 1) {
  if (plan.m == 0 || plan.k == 0 || plan.n == 0)
    throw ShapeError("batched_matmul: matrix dimensions must be positive");
  detail::require_plan_fits(plan, plan.a_strides, plan.m * plan.k, a.size(), "A");
  detail::require_plan_fits(plan, plan.b_strides, plan.k * plan.n, b.size(), "B");
  const std::size_t block = plan.m * plan.n;
  if (plan.c_strides != BatchPlan::dense(plan.extents, block))
    throw ShapeError("batched_matmul: output strides must be dense");

  BatchProduct<T> product{plan, std::vector<T>(plan.batch_count() * block, T(0))};
  const PoseDims a_dims{1, plan.m, plan.k}, b_dims{1, plan.k, plan.n};
  parallel_for(plan.batch_count(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) {
      const auto idx = plan.index_of(t);
      pose_matmul_accumulate<T>(a.subspan(BatchPlan::offset(plan.a_strides, idx), a_dims.size()),
                                a_dims,
                                b.subspan(BatchPlan::offset(plan.b_strides, idx), b_dims.size()),
                                b_dims, std::span<T>(product.data).subspan(t * block, block));
    }
  });
  return product;
}

/// Sums each output pose slice's tap group of products, in tap order.
template <Scalar T>
CapsuleTensor<T> output_reduce(const BatchProduct<T>& product, const ConvGeometry& g,
                               std::size_t workers = 1) {
  const std::size_t block = g.rows * g.cols;
  if (product.plan.extents != detail::axes_of(g) || product.block() != block ||
      product.data.size() != product.plan.batch_count() * block)
    throw ShapeError("output_reduce: product does not match geometry");
  auto out = make_output<T>(g);
  T* dst = out.data().data();
  const std::size_t S = g.slices, Q = g.taps(), HW = g.positions();
  // Owner of output pose (b, p, pos) is its flat index in the output tensor.
  parallel_for(g.batch * g.out_channels * HW, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t o = begin; o < end; ++o) {
      const std::size_t b = o / (g.out_channels * HW);
      const std::size_t p = (o / HW) % g.out_channels;
      const std::size_t pos = o % HW;
      const std::size_t group = ((p * g.batch + b) * HW + pos) * Q * S;
      for (std::size_t s = 0; s < S; ++s) {
        T* acc = dst + (o * S + s) * block;
        for (std::size_t q = 0; q < Q; ++q) {
          const T* src = product.data.data() + (group + q * S + s) * block;
          for (std::size_t e = 0; e < block; ++e) acc[e] += src[e];
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Backward stages

/// Copies every output-gradient pose slice to each of the C*kh*kw taps it was reduced from.
template <Scalar T>
void output_extend_into(std::span<const T> grad_output, const ConvGeometry& g,
                        std::span<T> out) {
  const std::size_t block = g.rows * g.cols, S = g.slices, Q = g.taps(), HW = g.positions();
  if (grad_output.size() != g.batch * g.out_channels * HW * S * block)
    throw ShapeError("output_extend: gradient length does not match geometry");
  if (out.size() != grad_output.size() * Q)
    throw ShapeError("output_extend: output length does not match geometry");
  T* dst = out.data();
  for (std::size_t p = 0; p < g.out_channels; ++p)
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t pos = 0; pos < HW; ++pos) {
        const T* pose = grad_output.data() + ((b * g.out_channels + p) * HW + pos) * S * block;
        for (std::size_t q = 0; q < Q; ++q, dst += S * block) std::copy_n(pose, S * block, dst);
      }
}

template <Scalar T>
ExtendedGradient<T> output_extend(const CapsuleTensor<T>& grad_output, const ConvGeometry& g) {
  check_output_gradient(g, grad_output);
  ExtendedGradient<T> e{g, std::vector<T>(grad_output.size() * g.taps())};
  output_extend_into<T>(grad_output.data(), g, e.data);
  return e;
}

/// Transposes `count` consecutive rows x cols blocks.
template <Scalar T>
std::vector<T> transpose_blocks(std::span<const T> data, std::size_t rows, std::size_t cols) {
  const std::size_t block = rows * cols;
  if (block == 0 || data.size() % block != 0)
    throw ShapeError("transpose_blocks: length not divisible by block size");
  std::vector<T> out(data.size());
  transpose_pose<T>(data, PoseDims{data.size() / block, rows, cols}, out);
  return out;
}

/// dK' = I'^T x O_d' : one K x N partial per batch.
inline BatchPlan make_kernel_grad_plan(const ConvGeometry& g) {
  BatchPlan plan;
  plan.extents = detail::axes_of(g);
  plan.m = g.inner;
  plan.k = g.rows;
  plan.n = g.cols;
  plan.a_strides = detail::replicated_strides(g, g.inner * g.rows);
  plan.b_strides = detail::replicated_strides(g, g.rows * g.cols);
  plan.c_strides = BatchPlan::dense(plan.extents, g.inner * g.cols);
  return plan;
}

/// dI' = O_d' x K'^T : one M x K partial per batch, laid out like ExtendedInput.
inline BatchPlan make_input_grad_plan(const ConvGeometry& g) {
  BatchPlan plan;
  plan.extents = detail::axes_of(g);
  plan.m = g.rows;
  plan.k = g.cols;
  plan.n = g.inner;
  plan.a_strides = detail::replicated_strides(g, g.rows * g.cols);
  plan.b_strides = detail::kernel_repeat_strides(g, g.cols * g.inner);
  plan.c_strides = BatchPlan::dense(plan.extents, g.rows * g.inner);
  return plan;
}

/// Strided sum of the per-(b, pos) kernel-gradient partials, (b, pos) ascending.
template <Scalar T>
ConvKernel<T> kernel_grad_reduce(const BatchProduct<T>& partials, const ConvGeometry& g,
                                 std::size_t workers = 1) {
  const std::size_t block = g.inner * g.cols;
  if (partials.plan.extents != detail::axes_of(g) || partials.block() != block)
    throw ShapeError("kernel_grad_reduce: partials do not match geometry");
  ConvKernel<T> grad(g.out_channels, g.in_channels, g.k_h, g.k_w, g.kernel_pose());
  const std::size_t S = g.slices, Q = g.taps(), HW = g.positions();
  T* dst = grad.data().data();
  // Kernel layout [p][q][s] coincides with the flat owner index.
  parallel_for(g.out_channels * Q * S, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t o = begin; o < end; ++o) {
      const std::size_t p = o / (Q * S), qs = o % (Q * S);
      T* acc = dst + o * block;
      for (std::size_t bp = 0; bp < g.batch * HW; ++bp) {
        const T* src = partials.data.data() + ((p * g.batch * HW + bp) * Q * S + qs) * block;
        for (std::size_t e = 0; e < block; ++e) acc[e] += src[e];
      }
    }
  });
  return grad;
}

/// Adjoint of input_extend: sums the replicas.
template <Scalar T>
void input_reduce_into(std::span<const T> columns, std::size_t replicas, std::span<T> out,
                       std::size_t workers = 1) {
  if (replicas == 0 || columns.size() != out.size() * replicas)
    throw ShapeError("input_reduce: input length must be replicas * output length");
  std::fill(out.begin(), out.end(), T(0));
  parallel_for(out.size(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = 0; r < replicas; ++r) {
      const T* src = columns.data() + r * out.size();
      for (std::size_t e = begin; e < end; ++e) out[e] += src[e];
    }
  });
}

template <Scalar T>
FlattenedInput<T> input_reduce(std::span<const T> columns, const ConvGeometry& g,
                               std::size_t workers = 1) {
  FlattenedInput<T> f{g, std::vector<T>(g.batch * g.positions() * g.column_length())};
  input_reduce_into<T>(columns, g.out_channels, f.data, workers);
  return f;
}

/// Adjoint of capsule_im2col: each column slot is added back to the input location it
/// was gathered from, in output-position order; padding slots are dropped.
template <Scalar T>
void capsule_col2im_into(std::span<const T> columns, const ConvGeometry& g, std::span<T> out,
                         std::size_t workers = 1) {
  const std::size_t pose = g.input_pose().size();
  const std::size_t col_len = g.column_length();
  if (columns.size() != g.batch * g.positions() * col_len)
    throw ShapeError("capsule_col2im: column length does not match geometry");
  if (out.size() != g.batch * g.in_channels * g.height * g.width * pose)
    throw ShapeError("capsule_col2im: output length does not match geometry");
  const auto stride = static_cast<std::ptrdiff_t>(g.cfg.stride);
  const auto pad = static_cast<std::ptrdiff_t>(g.cfg.padding);

  // Owner of input location (b, c, y, x) is its flat index; it gathers its slots.
  parallel_for(g.batch * g.in_channels * g.height * g.width, workers,
               [&](std::size_t begin, std::size_t end) {
    for (std::size_t loc = begin; loc < end; ++loc) {
      const std::size_t x = loc % g.width;
      const std::size_t y = (loc / g.width) % g.height;
      const std::size_t c = (loc / (g.width * g.height)) % g.in_channels;
      const std::size_t b = loc / (g.width * g.height * g.in_channels);
      T* acc = out.data() + loc * pose;
      std::fill_n(acc, pose, T(0));
      for (std::size_t i = 0; i < g.out_height; ++i) {
        const std::ptrdiff_t kr = static_cast<std::ptrdiff_t>(y) + pad - static_cast<std::ptrdiff_t>(i) * stride;
        if (kr < 0 || kr >= static_cast<std::ptrdiff_t>(g.k_h)) continue;
        for (std::size_t j = 0; j < g.out_width; ++j) {
          const std::ptrdiff_t kc = static_cast<std::ptrdiff_t>(x) + pad - static_cast<std::ptrdiff_t>(j) * stride;
          if (kc < 0 || kc >= static_cast<std::ptrdiff_t>(g.k_w)) continue;
          const std::size_t q = (c * g.k_h + static_cast<std::size_t>(kr)) * g.k_w + static_cast<std::size_t>(kc);
          const T* src = columns.data() + (b * g.positions() + i * g.out_width + j) * col_len + q * pose;
          for (std::size_t e = 0; e < pose; ++e) acc[e] += src[e];
        }
      }
    }
  });
}

template <Scalar T>
CapsuleTensor<T> capsule_col2im(const FlattenedInput<T>& columns, const ConvGeometry& g,
                                std::size_t workers = 1) {
  CapsuleTensor<T> out(g.batch, g.in_channels, g.height, g.width, g.input_pose());
  capsule_col2im_into<T>(columns.data, g, out.data(), workers);
  return out;
}

// ---------------------------------------------------------------------------
// Optimized kernels: register-blocked, fused product + reduction over views.

namespace detail {

/// acc(R x C) += A(R x I) * B(I x C), with A(r, i) = a[r * ar + i * ai] and
/// B(i, c) = b[i * bi + c * bc].
template <Scalar T>
[[gnu::always_inline]] inline void block_mac(const T* __restrict a, std::size_t ar,
                                             std::size_t ai, const T* __restrict b,
                                             std::size_t bi, std::size_t bc, T* __restrict acc,
                                             std::size_t R, std::size_t I, std::size_t C) {
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t i = 0; i < I; ++i) {
      const T av = a[r * ar + i * ai];
      for (std::size_t c = 0; c < C; ++c) acc[r * C + c] += av * b[i * bi + c * bc];
    }
}

/// Copies the rows x cols block at `src` into `dst` as its cols x rows transpose.
template <Scalar T>
[[gnu::always_inline]] inline void load_transposed(const T* __restrict src, std::size_t rows,
                                                   std::size_t cols, T* __restrict dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

/// Calls f(std::integral_constant<size_t, D>) with D the common pose extent when
/// M == K == N <= 4, else with D == 0 (runtime extents).
template <typename F>
decltype(auto) dispatch_square(const ConvGeometry& g, F&& f) {
  if (g.rows == g.inner && g.inner == g.cols) {
    switch (g.rows) {
      case 1: return f(std::integral_constant<std::size_t, 1>{});
      case 2: return f(std::integral_constant<std::size_t, 2>{});
      case 3: return f(std::integral_constant<std::size_t, 3>{});
      case 4: return f(std::integral_constant<std::size_t, 4>{});
      default: break;
    }
  }
  return f(std::integral_constant<std::size_t, 0>{});
}

template <Scalar T, std::size_t D>
struct Accumulator {
  // Fixed-size blocks live in a local array the compiler can keep in registers.
  std::array<T, D * D> fixed{};
  std::vector<T> dynamic;

  explicit Accumulator(std::size_t size) {
    if constexpr (D == 0) dynamic.resize(size);
  }
  T* data() {
    if constexpr (D == 0)
      return dynamic.data();
    else
      return fixed.data();
  }
  void clear() {
    if constexpr (D == 0)
      std::fill(dynamic.begin(), dynamic.end(), T(0));
    else
      fixed.fill(T(0));
  }
};

template <Scalar T, std::size_t D>
void fused_forward(const FlattenedInput<T>& flat, std::span<const T> kernel,
                   const BatchPlan& plan, const ConvGeometry& g, std::span<T> out,
                   std::size_t workers) {
  const std::size_t M = D ? D : g.rows, K = D ? D : g.inner, N = D ? D : g.cols;
  const std::size_t S = g.slices, Q = g.taps(), HW = g.positions();
  const auto& as = plan.a_strides;
  const auto& bs = plan.b_strides;
  parallel_for(g.batch * g.out_channels * HW, workers, [&](std::size_t begin, std::size_t end) {
    Accumulator<T, D> acc(M * N);
    for (std::size_t o = begin; o < end; ++o) {
      const std::size_t b = o / (g.out_channels * HW);
      const std::size_t p = (o / HW) % g.out_channels;
      const std::size_t pos = o % HW;
      const T* a_base = flat.data.data() + p * as[0] + b * as[1] + pos * as[2];
      const T* b_base = kernel.data() + p * bs[0] + b * bs[1] + pos * bs[2];
      for (std::size_t s = 0; s < S; ++s) {
        acc.clear();
        T* c = acc.data();
        for (std::size_t q = 0; q < Q; ++q)
          block_mac(a_base + q * as[3] + s * as[4], K, 1, b_base + q * bs[3] + s * bs[4], N, 1, c,
                    M, K, N);
        std::copy_n(c, M * N, out.data() + (o * S + s) * M * N);
      }
    }
  });
}

template <Scalar T, std::size_t D>
void fused_kernel_grad(const FlattenedInput<T>& flat, std::span<const T> grad_output,
                       const ConvGeometry& g, std::span<T> out, std::size_t workers) {
  const std::size_t M = D ? D : g.rows, K = D ? D : g.inner, N = D ? D : g.cols;
  const std::size_t S = g.slices, Q = g.taps(), HW = g.positions();
  const std::size_t col_len = g.column_length();
  parallel_for(g.out_channels * Q * S, workers, [&](std::size_t begin, std::size_t end) {
    Accumulator<T, D> acc(K * N);
    for (std::size_t o = begin; o < end; ++o) {
      const std::size_t p = o / (Q * S), qs = o % (Q * S);
      acc.clear();
      T* c = acc.data();
      for (std::size_t b = 0; b < g.batch; ++b) {
        const T* a = flat.data.data() + b * HW * col_len + qs * M * K;
        const T* d = grad_output.data() + (b * g.out_channels + p) * HW * S * M * N +
                     (qs % S) * M * N;
        for (std::size_t pos = 0; pos < HW; ++pos)
          block_mac(a + pos * col_len, 1, K, d + pos * S * M * N, N, 1, c, K, M, N);
      }
      std::copy_n(c, K * N, out.data() + o * K * N);
    }
  });
}

template <Scalar T, std::size_t D>
void fused_input_grad(std::span<const T> kernel, std::span<const T> grad_output,
                      const ConvGeometry& g, std::span<T> out, std::size_t workers) {
  const std::size_t M = D ? D : g.rows, K = D ? D : g.inner, N = D ? D : g.cols;
  const std::size_t S = g.slices, HW = g.positions();
  const std::size_t in_pose = S * M * K, out_pose = S * M * N, k_pose = S * K * N;
  const auto stride = static_cast<std::ptrdiff_t>(g.cfg.stride);
  const auto pad = static_cast<std::ptrdiff_t>(g.cfg.padding);
  parallel_for(g.batch * g.in_channels * g.height * g.width, workers,
               [&](std::size_t begin, std::size_t end) {
    Accumulator<T, D> acc(M * K);
    Accumulator<T, D> wt(N * K);
    for (std::size_t loc = begin; loc < end; ++loc) {
      const std::size_t x = loc % g.width;
      const std::size_t y = (loc / g.width) % g.height;
      const std::size_t c = (loc / (g.width * g.height)) % g.in_channels;
      const std::size_t b = loc / (g.width * g.height * g.in_channels);
      for (std::size_t s = 0; s < S; ++s) {
        acc.clear();
        T* dst = acc.data();
        for (std::size_t i = 0; i < g.out_height; ++i) {
          const std::ptrdiff_t kr = static_cast<std::ptrdiff_t>(y) + pad - static_cast<std::ptrdiff_t>(i) * stride;
          if (kr < 0 || kr >= static_cast<std::ptrdiff_t>(g.k_h)) continue;
          for (std::size_t j = 0; j < g.out_width; ++j) {
            const std::ptrdiff_t kc = static_cast<std::ptrdiff_t>(x) + pad - static_cast<std::ptrdiff_t>(j) * stride;
            if (kc < 0 || kc >= static_cast<std::ptrdiff_t>(g.k_w)) continue;
            const std::size_t q = (c * g.k_h + static_cast<std::size_t>(kr)) * g.k_w + static_cast<std::size_t>(kc);
            const std::size_t pos = i * g.out_width + j;
            for (std::size_t p = 0; p < g.out_channels; ++p) {
              const T* d = grad_output.data() + ((b * g.out_channels + p) * HW + pos) * out_pose + s * M * N;
              load_transposed(kernel.data() + (p * g.taps() + q) * k_pose + s * K * N, K, N,
                              wt.data());
              block_mac(d, N, 1, wt.data(), K, 1, dst, M, N, K);
            }
          }
        }
        std::copy_n(dst, M * K, out.data() + loc * in_pose + s * M * K);
      }
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Engines

template <Scalar T>
CapsuleTensor<T> accel_forward(const CapsuleTensor<T>& input, const ConvKernel<T>& kernel,
                               const ConvConfig& cfg, const ExecPolicy& policy = {}) {
  const ConvGeometry g = make_geometry(input, kernel, cfg);
  require_finite(input.data(), "input");
  require_finite(kernel.data(), "kernel");
  const auto flat = capsule_im2col(input, g, policy.workers);

  if (policy.mode == AccumulationMode::optimized) {
    auto out = make_output<T>(g);
    const auto plan = make_forward_view_plan(g);
    detail::dispatch_square(g, [&](auto d) {
      detail::fused_forward<T, decltype(d)::value>(flat, kernel.data(), plan, g, out.data(),
                                                    policy.workers);
    });
    return out;
  }

  const auto extended = input_extend(flat, g.out_channels);
  const auto extended_kernel = kernel_extend(kernel, g.positions());
  const auto product = batched_matmul<T>(extended.data, extended_kernel.data,
                                         make_forward_plan(g), policy.workers);
  return output_reduce(product, g, policy.workers);
}

template <Scalar T>
ConvGradients<T> accel_backward(const CapsuleTensor<T>& input, const ConvKernel<T>& kernel,
                                const CapsuleTensor<T>& grad_output, const ConvConfig& cfg,
                                const ExecPolicy& policy = {}) {
  const ConvGeometry g = make_geometry(input, kernel, cfg);
  require_finite(input.data(), "input");
  require_finite(kernel.data(), "kernel");
  check_output_gradient(g, grad_output);
  const auto flat = capsule_im2col(input, g, policy.workers);

  ConvGradients<T> grads{
      CapsuleTensor<T>(g.batch, g.in_channels, g.height, g.width, g.input_pose()),
      ConvKernel<T>(g.out_channels, g.in_channels, g.k_h, g.k_w, g.kernel_pose())};

  if (policy.mode == AccumulationMode::optimized) {
    detail::dispatch_square(g, [&](auto d) {
      constexpr std::size_t D = decltype(d)::value;
      detail::fused_kernel_grad<T, D>(flat, grad_output.data(), g, grads.kernel.data(),
                                      policy.workers);
      detail::fused_input_grad<T, D>(kernel.data(), grad_output.data(), g, grads.input.data(),
                                     policy.workers);
    });
    return grads;
  }

  const auto extended_grad = output_extend(grad_output, g);

  // Kernel gradient: per-position partials, then the strided reduction over (b, pos).
  {
    const auto extended = input_extend(flat, g.out_channels);
    const auto transposed = transpose_blocks<T>(extended.data, g.rows, g.inner);
    const auto partials = batched_matmul<T>(transposed, extended_grad.data,
                                            make_kernel_grad_plan(g), policy.workers);
    grads.kernel = kernel_grad_reduce(partials, g, policy.workers);
  }

  // Input gradient: per-replica columns, summed over replicas, scattered back.
  const auto extended_kernel = kernel_extend(kernel, g.positions());
  const auto transposed_kernel = transpose_blocks<T>(extended_kernel.data, g.inner, g.cols);
  const auto columns = batched_matmul<T>(extended_grad.data, transposed_kernel,
                                         make_input_grad_plan(g), policy.workers);
  const auto reduced = input_reduce<T>(columns.data, g, policy.workers);
  grads.input = capsule_col2im(reduced, g, policy.workers);
  return grads;
}

}  // namespace capsconv

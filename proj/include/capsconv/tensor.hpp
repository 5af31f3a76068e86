#pragma once

// Pose data model, canonical layouts, shape law and the small-matrix primitive.
//
// Feature maps are stored row-major as [B][C][H][W][S][M][K] and kernels as
// [C'][C][kh][kw][S][K][N]. A pose is a stack of S matrices; poses multiply
// slice by slice.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capsconv/errors.hpp"

namespace capsconv {

template <typename T>
concept Scalar = std::same_as<T, float> || std::same_as<T, double>;

enum class ScalarKind { f32, f64 };

inline const char* to_string(ScalarKind kind) { return kind == ScalarKind::f32 ? "f32" : "f64"; }

struct PoseDims {
  std::size_t slices = 1;
  std::size_t rows = 1;
  std::size_t cols = 1;

  constexpr std::size_t size() const noexcept { return slices * rows * cols; }
  constexpr std::size_t slice_size() const noexcept { return rows * cols; }

  void validate(const char* what) const {
    if (slices == 0 || rows == 0 || cols == 0)
      throw ShapeError(std::string(what) + ": pose dimensions must be positive");
  }

  friend bool operator==(const PoseDims&, const PoseDims&) = default;
};

inline std::string to_string(const PoseDims& p) {
  return std::to_string(p.slices) + "x" + std::to_string(p.rows) + "x" + std::to_string(p.cols);
}

struct ConvConfig {
  std::size_t stride = 1;
  std::size_t padding = 0;

  void validate() const {
    if (stride == 0) throw ShapeError("stride must be >= 1");
  }

  friend bool operator==(const ConvConfig&, const ConvConfig&) = default;
};

struct SpatialDims {
  std::size_t height = 0;
  std::size_t width = 0;

  friend bool operator==(const SpatialDims&, const SpatialDims&) = default;
};

/// Output spatial extent of a strided, zero-padded window sweep:
/// floor((H + 2*pad - kh) / stride) + 1, likewise for width.
inline SpatialDims output_dims(std::size_t height, std::size_t width, std::size_t k_h,
                               std::size_t k_w, const ConvConfig& cfg) {
  cfg.validate();
  if (k_h == 0 || k_w == 0) throw ShapeError("kernel extent must be positive");
  const std::size_t padded_h = height + 2 * cfg.padding;
  const std::size_t padded_w = width + 2 * cfg.padding;
  if (k_h > padded_h || k_w > padded_w)
    throw ShapeError("kernel " + std::to_string(k_h) + "x" + std::to_string(k_w) +
                     " larger than padded input " + std::to_string(padded_h) + "x" +
                     std::to_string(padded_w));
  return {(padded_h - k_h) / cfg.stride + 1, (padded_w - k_w) / cfg.stride + 1};
}

/// Row-major offset of `coords` inside a box of extents `dims`.
inline std::size_t linear_offset(std::span<const std::size_t> coords,
                                 std::span<const std::size_t> dims) {
  if (coords.size() != dims.size()) throw BoundsError("coordinate rank does not match extents");
  std::size_t offset = 0;
  for (std::size_t d = 0; d < dims.size(); ++d) {
    if (coords[d] >= dims[d])
      throw BoundsError("coordinate " + std::to_string(coords[d]) + " out of range for axis " +
                        std::to_string(d) + " of extent " + std::to_string(dims[d]));
    offset = offset * dims[d] + coords[d];
  }
  return offset;
}

/// Inverse of linear_offset.
inline std::vector<std::size_t> unravel_offset(std::size_t offset,
                                               std::span<const std::size_t> dims) {
  std::size_t total = 1;
  for (auto d : dims) total *= d;
  if (offset >= total) throw BoundsError("offset " + std::to_string(offset) + " out of range");
  std::vector<std::size_t> coords(dims.size());
  for (std::size_t d = dims.size(); d-- > 0;) {
    coords[d] = offset % dims[d];
    offset /= dims[d];
  }
  return coords;
}

template <Scalar T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <Scalar T>
void require_finite(std::span<const T> values, const char* what) {
  if (!all_finite(values)) throw NonFiniteError(std::string(what) + " contains NaN or Inf");
}

/// Batched feature map of capsule poses, layout [B][C][H][W][S][M][K].
template <Scalar T>
class CapsuleTensor {
 public:
  using value_type = T;

  CapsuleTensor() = default;

  CapsuleTensor(std::size_t batch, std::size_t channels, std::size_t height, std::size_t width,
                PoseDims pose)
      : batch_(batch), channels_(channels), height_(height), width_(width), pose_(pose) {
    pose_.validate("CapsuleTensor");
    data_.assign(expected_size(), T(0));
  }

  CapsuleTensor(std::size_t batch, std::size_t channels, std::size_t height, std::size_t width,
                PoseDims pose, std::vector<T> data)
      : batch_(batch), channels_(channels), height_(height), width_(width), pose_(pose),
        data_(std::move(data)) {
    pose_.validate("CapsuleTensor");
    if (data_.size() != expected_size())
      throw ShapeError("CapsuleTensor data length " + std::to_string(data_.size()) +
                       " does not match shape (expected " + std::to_string(expected_size()) + ")");
    require_finite<T>(data_, "CapsuleTensor");
  }

  std::size_t batch() const noexcept { return batch_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  const PoseDims& pose() const noexcept { return pose_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::array<std::size_t, 7> shape() const noexcept {
    return {batch_, channels_, height_, width_, pose_.slices, pose_.rows, pose_.cols};
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  /// Offset of the first scalar of pose (b, c, y, x). Throws BoundsError.
  std::size_t pose_offset(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    const std::array<std::size_t, 4> coords{b, c, y, x};
    const std::array<std::size_t, 4> dims{batch_, channels_, height_, width_};
    return linear_offset(coords, dims) * pose_.size();
  }

  std::span<T> pose_at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) {
    return std::span<T>(data_).subspan(pose_offset(b, c, y, x), pose_.size());
  }
  std::span<const T> pose_at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return std::span<const T>(data_).subspan(pose_offset(b, c, y, x), pose_.size());
  }

  bool same_shape(const CapsuleTensor& other) const noexcept { return shape() == other.shape(); }

  friend bool operator==(const CapsuleTensor&, const CapsuleTensor&) = default;

 private:
  std::size_t expected_size() const noexcept {
    return batch_ * channels_ * height_ * width_ * pose_.size();
  }

  std::size_t batch_ = 0;
  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  PoseDims pose_{};
  std::vector<T> data_;
};

/// Capsule kernel, layout [C'][C][kh][kw][S][K][N].
template <Scalar T>
class ConvKernel {
 public:
  using value_type = T;

  ConvKernel() = default;

  ConvKernel(std::size_t out_channels, std::size_t in_channels, std::size_t k_h, std::size_t k_w,
             PoseDims pose)
      : out_channels_(out_channels), in_channels_(in_channels), k_h_(k_h), k_w_(k_w), pose_(pose) {
    pose_.validate("ConvKernel");
    data_.assign(expected_size(), T(0));
  }

  ConvKernel(std::size_t out_channels, std::size_t in_channels, std::size_t k_h, std::size_t k_w,
             PoseDims pose, std::vector<T> data)
      : out_channels_(out_channels), in_channels_(in_channels), k_h_(k_h), k_w_(k_w), pose_(pose),
        data_(std::move(data)) {
    pose_.validate("ConvKernel");
    if (data_.size() != expected_size())
      throw ShapeError("ConvKernel data length " + std::to_string(data_.size()) +
                       " does not match shape (expected " + std::to_string(expected_size()) + ")");
    require_finite<T>(data_, "ConvKernel");
  }

  std::size_t out_channels() const noexcept { return out_channels_; }
  std::size_t in_channels() const noexcept { return in_channels_; }
  std::size_t k_h() const noexcept { return k_h_; }
  std::size_t k_w() const noexcept { return k_w_; }
  const PoseDims& pose() const noexcept { return pose_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::array<std::size_t, 7> shape() const noexcept {
    return {out_channels_, in_channels_, k_h_, k_w_, pose_.slices, pose_.rows, pose_.cols};
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  std::size_t pose_offset(std::size_t p, std::size_t c, std::size_t r, std::size_t s) const {
    const std::array<std::size_t, 4> coords{p, c, r, s};
    const std::array<std::size_t, 4> dims{out_channels_, in_channels_, k_h_, k_w_};
    return linear_offset(coords, dims) * pose_.size();
  }

  std::span<T> pose_at(std::size_t p, std::size_t c, std::size_t r, std::size_t s) {
    return std::span<T>(data_).subspan(pose_offset(p, c, r, s), pose_.size());
  }
  std::span<const T> pose_at(std::size_t p, std::size_t c, std::size_t r, std::size_t s) const {
    return std::span<const T>(data_).subspan(pose_offset(p, c, r, s), pose_.size());
  }

  bool same_shape(const ConvKernel& other) const noexcept { return shape() == other.shape(); }

  friend bool operator==(const ConvKernel&, const ConvKernel&) = default;

 private:
  std::size_t expected_size() const noexcept {
    return out_channels_ * in_channels_ * k_h_ * k_w_ * pose_.size();
  }

  std::size_t out_channels_ = 0;
  std::size_t in_channels_ = 0;
  std::size_t k_h_ = 0;
  std::size_t k_w_ = 0;
  PoseDims pose_{};
  std::vector<T> data_;
};

/// Every extent involved in one capsule convolution, validated once.
struct ConvGeometry {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t k_h = 0;
  std::size_t k_w = 0;
  std::size_t slices = 0;
  std::size_t rows = 0;   // M
  std::size_t inner = 0;  // K
  std::size_t cols = 0;   // N
  std::size_t out_height = 0;
  std::size_t out_width = 0;
  ConvConfig cfg{};

  std::size_t positions() const noexcept { return out_height * out_width; }
  std::size_t taps() const noexcept { return in_channels * k_h * k_w; }
  PoseDims input_pose() const noexcept { return {slices, rows, inner}; }
  PoseDims kernel_pose() const noexcept { return {slices, inner, cols}; }
  PoseDims output_pose() const noexcept { return {slices, rows, cols}; }
  /// Scalars gathered into one im2col column.
  std::size_t column_length() const noexcept { return taps() * slices * rows * inner; }

  /// Input coordinate touched by output index `o` and kernel tap `t`, or -1 in padding.
  std::ptrdiff_t source_row(std::size_t o, std::size_t t) const noexcept {
    const auto y = static_cast<std::ptrdiff_t>(o * cfg.stride + t) -
                   static_cast<std::ptrdiff_t>(cfg.padding);
    return (y < 0 || y >= static_cast<std::ptrdiff_t>(height)) ? -1 : y;
  }
  std::ptrdiff_t source_col(std::size_t o, std::size_t t) const noexcept {
    const auto x = static_cast<std::ptrdiff_t>(o * cfg.stride + t) -
                   static_cast<std::ptrdiff_t>(cfg.padding);
    return (x < 0 || x >= static_cast<std::ptrdiff_t>(width)) ? -1 : x;
  }

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

inline ConvGeometry make_geometry(std::size_t batch, std::size_t in_channels, std::size_t height,
                                  std::size_t width, PoseDims input_pose,
                                  std::size_t out_channels, std::size_t k_h, std::size_t k_w,
                                  PoseDims kernel_pose, const ConvConfig& cfg) {
  input_pose.validate("input");
  kernel_pose.validate("kernel");
  if (kernel_pose.slices != input_pose.slices)
    throw ShapeError("kernel pose slices " + std::to_string(kernel_pose.slices) +
                     " != input pose slices " + std::to_string(input_pose.slices));
  if (kernel_pose.rows != input_pose.cols)
    throw ShapeError("kernel pose inner dim " + std::to_string(kernel_pose.rows) +
                     " != input pose cols " + std::to_string(input_pose.cols));
  const auto out = output_dims(height, width, k_h, k_w, cfg);
  ConvGeometry g;
  g.batch = batch;
  g.in_channels = in_channels;
  g.out_channels = out_channels;
  g.height = height;
  g.width = width;
  g.k_h = k_h;
  g.k_w = k_w;
  g.slices = input_pose.slices;
  g.rows = input_pose.rows;
  g.inner = input_pose.cols;
  g.cols = kernel_pose.cols;
  g.out_height = out.height;
  g.out_width = out.width;
  g.cfg = cfg;
  return g;
}

template <Scalar T>
ConvGeometry make_geometry(const CapsuleTensor<T>& input, const ConvKernel<T>& kernel,
                           const ConvConfig& cfg) {
  if (kernel.in_channels() != input.channels())
    throw ShapeError("kernel in_channels " + std::to_string(kernel.in_channels()) +
                     " != input channels " + std::to_string(input.channels()));
  return make_geometry(input.batch(), input.channels(), input.height(), input.width(),
                       input.pose(), kernel.out_channels(), kernel.k_h(), kernel.k_w(),
                       kernel.pose(), cfg);
}

template <Scalar T>
CapsuleTensor<T> make_output(const ConvGeometry& g) {
  return CapsuleTensor<T>(g.batch, g.out_channels, g.out_height, g.out_width, g.output_pose());
}

/// acc[s] += in[s] * ker[s] for every slice s. Each product entry is reduced over
/// the inner dimension in ascending order starting from zero, then added to acc.
template <Scalar T>
void pose_matmul_accumulate(std::span<const T> in_pose, const PoseDims& in_dims,
                            std::span<const T> kernel_pose, const PoseDims& kernel_dims,
                            std::span<T> acc) {
  if (in_dims.slices != kernel_dims.slices || in_dims.cols != kernel_dims.rows)
    throw ShapeError("pose_matmul_accumulate: " + to_string(in_dims) + " * " +
                     to_string(kernel_dims) + " is not conformable");
  const std::size_t S = in_dims.slices, M = in_dims.rows, K = in_dims.cols,
                    N = kernel_dims.cols;
  if (in_pose.size() != in_dims.size() || kernel_pose.size() != kernel_dims.size() ||
      acc.size() != S * M * N)
    throw ShapeError("pose_matmul_accumulate: buffer length does not match pose dims");
  for (std::size_t s = 0; s < S; ++s) {
    const T* a = in_pose.data() + s * M * K;
    const T* b = kernel_pose.data() + s * K * N;
    T* c = acc.data() + s * M * N;
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t n = 0; n < N; ++n) {
        T dot = 0;
        for (std::size_t k = 0; k < K; ++k) dot += a[m * K + k] * b[k * N + n];
        c[m * N + n] += dot;
      }
    }
  }
}

/// Slice-wise transpose: (S, R, C) -> (S, C, R).
template <Scalar T>
void transpose_pose(std::span<const T> in, const PoseDims& dims, std::span<T> out) {
  if (in.size() != dims.size() || out.size() != dims.size())
    throw ShapeError("transpose_pose: buffer length does not match pose dims");
  const std::size_t R = dims.rows, C = dims.cols;
  for (std::size_t s = 0; s < dims.slices; ++s)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) out[s * R * C + c * R + r] = in[s * R * C + r * C + c];
}

}  // namespace capsconv

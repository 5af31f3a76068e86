#pragma once

// Index-table engine: every pose multiplication is precomputed as an
// (input offset, weight offset, output offset) triple and the whole table is
// swept by one flat parallel loop, partitioned so that each destination pose
// has a single owner.

#include <cstddef>
#include <span>
#include <vector>

#include "capsconv/lowering.hpp"
#include "capsconv/parallel.hpp"
#include "capsconv/reference.hpp"
#include "capsconv/tensor.hpp"

namespace capsconv {

/// Scalar offsets of the first element of each participating pose.
struct IndexTriple {
  std::size_t input = 0;
  std::size_t weight = 0;
  std::size_t output = 0;

  friend bool operator==(const IndexTriple&, const IndexTriple&) = default;
};

struct IndexTable {
  ConvGeometry geometry;
  /// Ordered by output pose, then (in channel, kernel row, kernel col).
  std::vector<IndexTriple> triples;
  /// Triples of output pose o are triples[output_starts[o] .. output_starts[o + 1]).
  std::vector<std::size_t> output_starts;
  /// The same triples regrouped (stably) by kernel pose and by input pose, for backward.
  std::vector<IndexTriple> by_weight, by_input;
  std::vector<std::size_t> weight_starts, input_starts;

  std::size_t size() const noexcept { return triples.size(); }
};

namespace detail {

inline void counting_group(const std::vector<IndexTriple>& triples, std::size_t groups,
                           std::size_t IndexTriple::*field, std::size_t pose,
                           std::vector<IndexTriple>& order, std::vector<std::size_t>& starts) {
  starts.assign(groups + 1, 0);
  for (const auto& t : triples) ++starts[t.*field / pose + 1];
  for (std::size_t g = 0; g < groups; ++g) starts[g + 1] += starts[g];
  std::vector<std::size_t> cursor(starts.begin(), starts.end() - 1);
  order.resize(triples.size());
  for (const auto& t : triples) order[cursor[t.*field / pose]++] = t;
}

}  // namespace detail

/// Builds the task table for one convolution. Tasks whose window tap lies in
/// the zero padding are omitted.
inline IndexTable build_index_table(const ConvGeometry& g) {
  IndexTable table;
  table.geometry = g;
  const std::size_t in_pose = g.input_pose().size();
  const std::size_t k_pose = g.kernel_pose().size();
  const std::size_t out_pose = g.output_pose().size();
  const std::size_t outputs = g.batch * g.out_channels * g.positions();
  table.triples.reserve(outputs * g.taps());
  table.output_starts.reserve(outputs + 1);

  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t p = 0; p < g.out_channels; ++p)
      for (std::size_t i = 0; i < g.out_height; ++i)
        for (std::size_t j = 0; j < g.out_width; ++j) {
          const std::size_t o = ((b * g.out_channels + p) * g.out_height + i) * g.out_width + j;
          table.output_starts.push_back(table.triples.size());
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t kr = 0; kr < g.k_h; ++kr) {
              const auto y = g.source_row(i, kr);
              if (y < 0) continue;
              for (std::size_t kc = 0; kc < g.k_w; ++kc) {
                const auto x = g.source_col(j, kc);
                if (x < 0) continue;
                const std::size_t in =
                    ((b * g.in_channels + c) * g.height + static_cast<std::size_t>(y)) * g.width +
                    static_cast<std::size_t>(x);
                const std::size_t w = ((p * g.in_channels + c) * g.k_h + kr) * g.k_w + kc;
                table.triples.push_back({in * in_pose, w * k_pose, o * out_pose});
              }
            }
        }
  table.output_starts.push_back(table.triples.size());

  detail::counting_group(table.triples, g.out_channels * g.taps(), &IndexTriple::weight, k_pose,
                         table.by_weight, table.weight_starts);
  detail::counting_group(table.triples, g.batch * g.in_channels * g.height * g.width,
                         &IndexTriple::input, in_pose, table.by_input, table.input_starts);
  return table;
}

template <Scalar T>
IndexTable build_index_table(const CapsuleTensor<T>& input, const ConvKernel<T>& kernel,
                             const ConvConfig& cfg) {
  return build_index_table(make_geometry(input, kernel, cfg));
}

namespace detail {

template <Scalar T>
ConvGeometry require_table_matches(const IndexTable& table, const CapsuleTensor<T>& input,
                                   const ConvKernel<T>& kernel) {
  const ConvGeometry g = make_geometry(input, kernel, table.geometry.cfg);
  if (!(g == table.geometry)) throw ShapeError("index table was built for different shapes");
  require_finite(input.data(), "input");
  require_finite(kernel.data(), "kernel");
  return g;
}

template <Scalar T, std::size_t D>
void indexed_forward_optimized(const T* input, const T* kernel, const IndexTable& table,
                               const ConvGeometry& g, T* out, std::size_t workers) {
  const std::size_t M = D ? D : g.rows, K = D ? D : g.inner, N = D ? D : g.cols;
  const std::size_t S = g.slices;
  const std::size_t outputs = table.output_starts.size() - 1;
  parallel_for(outputs, workers, [&](std::size_t begin, std::size_t end) {
    Accumulator<T, D> acc(M * N);
    for (std::size_t o = begin; o < end; ++o) {
      const std::size_t first = table.output_starts[o], last = table.output_starts[o + 1];
      for (std::size_t s = 0; s < S; ++s) {
        acc.clear();
        T* c = acc.data();
        for (std::size_t n = first; n < last; ++n) {
          const auto& t = table.triples[n];
          block_mac(input + t.input + s * M * K, K, 1, kernel + t.weight + s * K * N, N, 1, c, M,
                    K, N);
        }
        std::copy_n(c, M * N, out + (o * S + s) * M * N);
      }
    }
  });
}

}  // namespace detail

template <Scalar T>
CapsuleTensor<T> indexed_forward(const CapsuleTensor<T>& input, const ConvKernel<T>& kernel,
                                 const IndexTable& table, const ExecPolicy& policy = {}) {
  const ConvGeometry g = detail::require_table_matches(table, input, kernel);
  auto out = make_output<T>(g);

  if (policy.mode == AccumulationMode::optimized) {
    detail::dispatch_square(g, [&](auto d) {
      detail::indexed_forward_optimized<T, decltype(d)::value>(
          input.data().data(), kernel.data().data(), table, g, out.data().data(), policy.workers);
    });
    return out;
  }

  const PoseDims in_dims = g.input_pose(), k_dims = g.kernel_pose(), o_dims = g.output_pose();
  const auto in = input.data();
  const auto ker = kernel.data();
  auto dst = out.data();
  parallel_for(table.output_starts.size() - 1, policy.workers,
               [&](std::size_t begin, std::size_t end) {
    for (std::size_t o = begin; o < end; ++o)
      for (std::size_t n = table.output_starts[o]; n < table.output_starts[o + 1]; ++n) {
        const auto& t = table.triples[n];
        pose_matmul_accumulate<T>(in.subspan(t.input, in_dims.size()), in_dims,
                                  ker.subspan(t.weight, k_dims.size()), k_dims,
                                  dst.subspan(t.output, o_dims.size()));
      }
  });
  return out;
}

/// Backward through the same table: kernel gradients are owned per kernel pose,
/// input gradients per input pose.
template <Scalar T>
ConvGradients<T> indexed_backward(const CapsuleTensor<T>& input, const ConvKernel<T>& kernel,
                                  const CapsuleTensor<T>& grad_output, const IndexTable& table,
                                  const ExecPolicy& policy = {}) {
  const ConvGeometry g = detail::require_table_matches(table, input, kernel);
  check_output_gradient(g, grad_output);
  ConvGradients<T> grads{
      CapsuleTensor<T>(g.batch, g.in_channels, g.height, g.width, g.input_pose()),
      ConvKernel<T>(g.out_channels, g.in_channels, g.k_h, g.k_w, g.kernel_pose())};
  const T* in = input.data().data();
  const T* ker = kernel.data().data();
  const T* dout = grad_output.data().data();
  T* d_in = grads.input.data().data();
  T* d_ker = grads.kernel.data().data();
  const std::size_t S = g.slices;

  if (policy.mode == AccumulationMode::optimized) {
    detail::dispatch_square(g, [&](auto d) {
      constexpr std::size_t D = decltype(d)::value;
      const std::size_t M = D ? D : g.rows, K = D ? D : g.inner, N = D ? D : g.cols;
      parallel_for(table.weight_starts.size() - 1, policy.workers,
                   [&](std::size_t begin, std::size_t end) {
        detail::Accumulator<T, D> acc(K * N);
        for (std::size_t w = begin; w < end; ++w)
          for (std::size_t s = 0; s < S; ++s) {
            acc.clear();
            T* c = acc.data();
            for (std::size_t n = table.weight_starts[w]; n < table.weight_starts[w + 1]; ++n) {
              const auto& t = table.by_weight[n];
              detail::block_mac(in + t.input + s * M * K, 1, K, dout + t.output + s * M * N, N, 1,
                                c, K, M, N);
            }
            std::copy_n(c, K * N, d_ker + (w * S + s) * K * N);
          }
      });
      parallel_for(table.input_starts.size() - 1, policy.workers,
                   [&](std::size_t begin, std::size_t end) {
        detail::Accumulator<T, D> acc(M * K);
        detail::Accumulator<T, D> wt(N * K);
        for (std::size_t loc = begin; loc < end; ++loc)
          for (std::size_t s = 0; s < S; ++s) {
            acc.clear();
            T* c = acc.data();
            for (std::size_t n = table.input_starts[loc]; n < table.input_starts[loc + 1]; ++n) {
              const auto& t = table.by_input[n];
              detail::load_transposed(ker + t.weight + s * K * N, K, N, wt.data());
              detail::block_mac(dout + t.output + s * M * N, N, 1, wt.data(), K, 1, c, M, N, K);
            }
            std::copy_n(c, M * K, d_in + (loc * S + s) * M * K);
          }
      });
    });
    return grads;
  }

  const PoseDims in_t{S, g.inner, g.rows}, o_dims{S, g.rows, g.cols}, k_t{S, g.cols, g.inner};
  const std::size_t in_pose = g.input_pose().size(), k_pose = g.kernel_pose().size(),
                    out_pose = o_dims.size();
  parallel_for(table.weight_starts.size() - 1, policy.workers,
               [&](std::size_t begin, std::size_t end) {
    std::vector<T> transposed(in_pose);
    for (std::size_t w = begin; w < end; ++w)
      for (std::size_t n = table.weight_starts[w]; n < table.weight_starts[w + 1]; ++n) {
        const auto& t = table.by_weight[n];
        transpose_pose<T>({in + t.input, in_pose}, g.input_pose(), transposed);
        pose_matmul_accumulate<T>(transposed, in_t, {dout + t.output, out_pose}, o_dims,
                                  {d_ker + w * k_pose, k_pose});
      }
  });
  parallel_for(table.input_starts.size() - 1, policy.workers,
               [&](std::size_t begin, std::size_t end) {
    std::vector<T> transposed(k_pose);
    for (std::size_t loc = begin; loc < end; ++loc)
      for (std::size_t n = table.input_starts[loc]; n < table.input_starts[loc + 1]; ++n) {
        const auto& t = table.by_input[n];
        transpose_pose<T>({ker + t.weight, k_pose}, g.kernel_pose(), transposed);
        pose_matmul_accumulate<T>({dout + t.output, out_pose}, o_dims, transposed, k_t,
                                  {d_in + loc * in_pose, in_pose});
      }
  });
  return grads;
}

}  // namespace capsconv

#pragma once

// A plain stack of capsule-convolution layers with no inter-layer nonlinearity.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "capsconv/index_table.hpp"
#include "capsconv/lowering.hpp"
#include "capsconv/parallel.hpp"
#include "capsconv/random.hpp"
#include "capsconv/reference.hpp"
#include "capsconv/tensor.hpp"

namespace capsconv {

enum class Engine { naive, accel, indexed };

inline const char* to_string(Engine engine) {
  switch (engine) {
    case Engine::naive: return "naive";
    case Engine::accel: return "accel";
    case Engine::indexed: return "indexed";
  }
  return "?";
}

inline std::optional<Engine> parse_engine(std::string_view name) {
  if (name == "naive") return Engine::naive;
  if (name == "accel") return Engine::accel;
  if (name == "indexed") return Engine::indexed;
  return std::nullopt;
}

inline constexpr Engine kAllEngines[] = {Engine::naive, Engine::accel, Engine::indexed};

struct InputSpec {
  std::size_t batch = 1;
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  PoseDims pose{};
};

struct LayerSpec {
  std::size_t k_h = 3;
  std::size_t k_w = 3;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  PoseDims kernel_pose{};  // (S, K, N)
  ConvConfig cfg{};
  Engine engine = Engine::accel;
};

struct NetworkConfig {
  InputSpec input;
  std::vector<LayerSpec> layers;
  ScalarKind scalar = ScalarKind::f64;
  std::uint64_t seed = 0;

  /// Geometry of every layer, folding the shape law through the stack. Throws
  /// ShapeError naming the first incompatible layer.
  std::vector<ConvGeometry> geometries() const {
    if (layers.empty()) throw ShapeError("network has no layers");
    std::vector<ConvGeometry> out;
    out.reserve(layers.size());
    std::size_t channels = input.channels, height = input.height, width = input.width;
    PoseDims pose = input.pose;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      const std::string where = "layer " + std::to_string(l + 1) + ": ";
      if (layer.in_channels != channels)
        throw ShapeError(where + "in_channels " + std::to_string(layer.in_channels) +
                         " != incoming channels " + std::to_string(channels));
      try {
        out.push_back(make_geometry(input.batch, channels, height, width, pose,
                                    layer.out_channels, layer.k_h, layer.k_w, layer.kernel_pose,
                                    layer.cfg));
      } catch (const ShapeError& e) {
        throw ShapeError(where + e.what());
      }
      const auto& g = out.back();
      channels = g.out_channels;
      height = g.out_height;
      width = g.out_width;
      pose = g.output_pose();
    }
    return out;
  }

  std::array<std::size_t, 7> output_shape() const {
    const auto g = geometries().back();
    return {g.batch, g.out_channels, g.out_height, g.out_width, g.slices, g.rows, g.cols};
  }
};

/// Five 3x3 stride-1 layers, channels 1 -> 4 -> 8 -> 8 -> 8 -> 8, 4x4 poses,
/// on a batch of 8 single-channel 20x20 inputs, benchmarked in f32.
inline NetworkConfig default_network_config() {
  NetworkConfig net;
  net.scalar = ScalarKind::f32;
  net.seed = 2021;
  net.input = {8, 1, 20, 20, PoseDims{1, 4, 4}};
  const std::size_t channels[] = {1, 4, 8, 8, 8, 8};
  for (std::size_t l = 0; l < 5; ++l) {
    LayerSpec layer;
    layer.k_h = layer.k_w = 3;
    layer.in_channels = channels[l];
    layer.out_channels = channels[l + 1];
    layer.kernel_pose = {1, 4, 4};
    net.layers.push_back(layer);
  }
  return net;
}

/// Uniform in [-0.5, 0.5] scaled by 1 / sqrt(kh * kw * C * K), one stream for the whole stack.
template <Scalar T>
std::vector<ConvKernel<T>> init_parameters(const NetworkConfig& net, std::uint64_t seed) {
  const auto geometries = net.geometries();
  Rng rng(seed);
  std::vector<ConvKernel<T>> params;
  params.reserve(geometries.size());
  for (const auto& g : geometries) {
    ConvKernel<T> kernel(g.out_channels, g.in_channels, g.k_h, g.k_w, g.kernel_pose());
    const double scale = 1.0 / std::sqrt(static_cast<double>(g.k_h * g.k_w * g.in_channels * g.inner));
    for (auto& v : kernel.data()) v = static_cast<T>(rng.uniform(-0.5, 0.5) * scale);
    params.push_back(std::move(kernel));
  }
  return params;
}

template <Scalar T>
CapsuleTensor<T> random_input(const NetworkConfig& net, std::uint64_t seed) {
  CapsuleTensor<T> x(net.input.batch, net.input.channels, net.input.height, net.input.width,
                     net.input.pose);
  Rng rng(seed ^ 0xA5A5A5A5A5A5A5A5ull);
  fill_uniform(x.data(), rng);
  return x;
}

/// Per-layer inputs retained by a forward pass.
template <Scalar T>
struct Tape {
  std::vector<CapsuleTensor<T>> inputs;
};

template <Scalar T>
struct NetworkGradients {
  CapsuleTensor<T> input;
  std::vector<ConvKernel<T>> kernels;
};

/// Single-layer dispatch. `table` is required for the indexed engine.
template <Scalar T>
CapsuleTensor<T> conv_forward(Engine engine, const CapsuleTensor<T>& input,
                              const ConvKernel<T>& kernel, const ConvConfig& cfg,
                              const ExecPolicy& policy, const IndexTable* table = nullptr) {
  switch (engine) {
    case Engine::naive: return naive_forward(input, kernel, cfg);
    case Engine::accel: return accel_forward(input, kernel, cfg, policy);
    case Engine::indexed: {
      if (table) return indexed_forward(input, kernel, *table, policy);
      return indexed_forward(input, kernel, build_index_table(input, kernel, cfg), policy);
    }
  }
  throw Error("unknown engine");
}

template <Scalar T>
ConvGradients<T> conv_backward(Engine engine, const CapsuleTensor<T>& input,
                               const ConvKernel<T>& kernel, const CapsuleTensor<T>& grad_output,
                               const ConvConfig& cfg, const ExecPolicy& policy,
                               const IndexTable* table = nullptr) {
  switch (engine) {
    case Engine::naive: return naive_backward(input, kernel, grad_output, cfg);
    case Engine::accel: return accel_backward(input, kernel, grad_output, cfg, policy);
    case Engine::indexed: {
      if (table) return indexed_backward(input, kernel, grad_output, *table, policy);
      return indexed_backward(input, kernel, grad_output, build_index_table(input, kernel, cfg),
                              policy);
    }
  }
  throw Error("unknown engine");
}

/// Configuration plus parameters. Index tables for indexed layers are built up
/// front, since they only depend on shapes.
template <Scalar T>
class Network {
 public:
  Network(NetworkConfig config, std::vector<ConvKernel<T>> params)
      : config_(std::move(config)), geometries_(config_.geometries()), params_(std::move(params)) {
    if (params_.size() != geometries_.size())
      throw ShapeError("expected " + std::to_string(geometries_.size()) + " kernels, got " +
                       std::to_string(params_.size()));
    for (std::size_t l = 0; l < params_.size(); ++l) {
      const auto& g = geometries_[l];
      const std::array<std::size_t, 7> expected{g.out_channels, g.in_channels, g.k_h,  g.k_w,
                                                g.slices,       g.inner,       g.cols};
      if (params_[l].shape() != expected)
        throw ShapeError("layer " + std::to_string(l + 1) + ": kernel shape mismatch");
    }
    tables_.resize(geometries_.size());
    for (std::size_t l = 0; l < geometries_.size(); ++l)
      if (config_.layers[l].engine == Engine::indexed) tables_[l] = build_index_table(geometries_[l]);
  }

  explicit Network(NetworkConfig config)
      : Network(config, init_parameters<T>(config, config.seed)) {}

  const NetworkConfig& config() const noexcept { return config_; }
  const std::vector<ConvGeometry>& geometries() const noexcept { return geometries_; }
  const std::vector<ConvKernel<T>>& parameters() const noexcept { return params_; }
  std::vector<ConvKernel<T>>& parameters() noexcept { return params_; }

  /// Switches every layer to `engine`, building index tables when needed.
  void set_engine(Engine engine) {
    for (std::size_t l = 0; l < config_.layers.size(); ++l) set_engine(l, engine);
  }

  void set_engine(std::size_t layer, Engine engine) {
    config_.layers.at(layer).engine = engine;
    if (engine == Engine::indexed && !tables_[layer])
      tables_[layer] = build_index_table(geometries_[layer]);
  }

  std::pair<CapsuleTensor<T>, Tape<T>> forward(const CapsuleTensor<T>& x,
                                               const ExecPolicy& policy = {}) const {
    const auto& in = config_.input;
    if (x.batch() != in.batch || x.channels() != in.channels || x.height() != in.height ||
        x.width() != in.width || x.pose() != in.pose)
      throw ShapeError("network input does not match the configured input shape");
    Tape<T> tape;
    tape.inputs.reserve(params_.size());
    CapsuleTensor<T> current = x;
    for (std::size_t l = 0; l < params_.size(); ++l) {
      const auto& layer = config_.layers[l];
      auto next = conv_forward(layer.engine, current, params_[l], layer.cfg, policy, table(l));
      tape.inputs.push_back(std::move(current));
      current = std::move(next);
    }
    return {std::move(current), std::move(tape)};
  }

  NetworkGradients<T> backward(const Tape<T>& tape, const CapsuleTensor<T>& grad_output,
                               const ExecPolicy& policy = {}) const {
    if (tape.inputs.size() != params_.size())
      throw TapeMismatchError("tape holds " + std::to_string(tape.inputs.size()) +
                              " layers, network has " + std::to_string(params_.size()));
    for (std::size_t l = 0; l < params_.size(); ++l) {
      const auto& g = geometries_[l];
      const auto& t = tape.inputs[l];
      if (t.batch() != g.batch || t.channels() != g.in_channels || t.height() != g.height ||
          t.width() != g.width || t.pose() != g.input_pose())
        throw TapeMismatchError("tape entry for layer " + std::to_string(l + 1) +
                                " does not match its geometry");
    }
    const auto& last = geometries_.back();
    const std::array<std::size_t, 7> out_shape{last.batch,  last.out_channels, last.out_height,
                                               last.out_width, last.slices,   last.rows,
                                               last.cols};
    if (grad_output.shape() != out_shape)
      throw TapeMismatchError("output gradient does not match the network output shape");

    NetworkGradients<T> grads;
    grads.kernels.resize(params_.size());
    CapsuleTensor<T> upstream = grad_output;
    for (std::size_t l = params_.size(); l-- > 0;) {
      const auto& layer = config_.layers[l];
      auto g = conv_backward(layer.engine, tape.inputs[l], params_[l], upstream, layer.cfg, policy,
                             table(l));
      grads.kernels[l] = std::move(g.kernel);
      upstream = std::move(g.input);
    }
    grads.input = std::move(upstream);
    return grads;
  }

 private:
  const IndexTable* table(std::size_t l) const {
    return tables_[l] ? &*tables_[l] : nullptr;
  }

  NetworkConfig config_;
  std::vector<ConvGeometry> geometries_;
  std::vector<ConvKernel<T>> params_;
  std::vector<std::optional<IndexTable>> tables_;
};

template <Scalar T>
std::pair<CapsuleTensor<T>, Tape<T>> network_forward(const Network<T>& net,
                                                     const CapsuleTensor<T>& x,
                                                     const ExecPolicy& policy = {}) {
  return net.forward(x, policy);
}

template <Scalar T>
NetworkGradients<T> network_backward(const Network<T>& net, const Tape<T>& tape,
                                     const CapsuleTensor<T>& grad_output,
                                     const ExecPolicy& policy = {}) {
  return net.backward(tape, grad_output, policy);
}

}  // namespace capsconv

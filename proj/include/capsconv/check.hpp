#pragma once

// Self-check suites run by `capsconv check`: oracle equivalence of the
// accelerated engines, gradient checks, adjoint identities and determinism.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "capsconv/capsnet.hpp"
#include "capsconv/compare.hpp"
#include "capsconv/config.hpp"
#include "capsconv/index_table.hpp"
#include "capsconv/lowering.hpp"
#include "capsconv/random.hpp"
#include "capsconv/reference.hpp"

namespace capsconv {

struct SuiteResult {
  SuiteResult() = default;
  explicit SuiteResult(std::string suite) : name(std::move(suite)) {}

  std::string name;
  std::size_t checks = 0;
  std::vector<std::string> failures;

  bool passed() const noexcept { return failures.empty(); }

  /// Records one assertion; `detail` is only built on failure.
  void expect(bool ok, const std::function<std::string()>& detail) {
    ++checks;
    if (!ok) failures.push_back(detail());
  }
};

struct CheckReport {
  std::vector<SuiteResult> suites;

  bool passed() const noexcept {
    for (const auto& s : suites)
      if (!s.passed()) return false;
    return !suites.empty();
  }

  std::string summary() const {
    std::ostringstream out;
    std::size_t failed = 0;
    for (const auto& s : suites) {
      out << (s.passed() ? "[PASS] " : "[FAIL] ") << s.name << " (" << s.checks << " checks";
      if (!s.passed()) out << ", " << s.failures.size() << " failed";
      out << ")\n";
      for (const auto& f : s.failures) out << "    " << f << "\n";
      failed += s.failures.size();
    }
    out << (passed() ? "all suites passed" : std::to_string(failed) + " check(s) failed") << "\n";
    return out.str();
  }
};

struct Tolerances {
  double optimized = 1e-9;       // optimized vs reference engines, f64
  double single = 1e-4;          // f32 engines vs f32 oracle
  double gradient = 1e-6;        // analytic vs central differences, per layer
  double network_gradient = 1e-5;
  double adjoint = 1e-12;

  static Tolerances from(const CheckOptions& opts) {
    Tolerances t;
    if (opts.tolerance) {
      const double v = *opts.tolerance;
      t = {v, v, v, v, v};
    }
    return t;
  }
};

inline constexpr double kFiniteDifferenceStep = 1e-5;

namespace detail {

inline std::string describe(const char* what, std::uint64_t seed, std::size_t index,
                            double err = -1) {
  std::ostringstream out;
  out << what << " [instance " << index << ", seed " << seed << "]";
  if (err >= 0) out << " error " << err;
  return out.str();
}

template <Scalar T>
bool same(const CapsuleTensor<T>& a, const CapsuleTensor<T>& b) {
  return a.shape() == b.shape() && exactly_equal<T>(a.data(), b.data());
}

template <Scalar T>
bool same(const ConvGradients<T>& a, const ConvGradients<T>& b) {
  return same(a.input, b.input) && a.kernel.shape() == b.kernel.shape() &&
         exactly_equal<T>(a.kernel.data(), b.kernel.data());
}

template <Scalar T>
double gradient_error(const ConvGradients<T>& a, const ConvGradients<T>& b) {
  return std::max(relative_error<T>(a.input.data(), b.input.data()),
                  relative_error<T>(a.kernel.data(), b.kernel.data()));
}

}  // namespace detail

/// Figure-style golden case: all-ones 1x5x5 input of 3x3x3 capsules convolved
/// with an all-ones 4x4 kernel gives 48 everywhere in a 1x2x2 map.
inline SuiteResult check_golden() {
  SuiteResult r{"golden all-ones convolution"};
  const PoseDims pose{3, 3, 3};
  CapsuleTensor<double> input(1, 1, 5, 5, pose, std::vector<double>(5 * 5 * 27, 1.0));
  ConvKernel<double> kernel(1, 1, 4, 4, pose, std::vector<double>(16 * 27, 1.0));
  const ConvConfig cfg{1, 0};
  const std::array<std::size_t, 7> shape{1, 1, 2, 2, 3, 3, 3};
  const auto table = build_index_table(input, kernel, cfg);
  auto all_equal = [](const auto& t, double v) {
    for (double x : t.data())
      if (x != v) return false;
    return true;
  };
  for (auto mode : {AccumulationMode::reference, AccumulationMode::optimized}) {
    const ExecPolicy policy{2, mode};
    for (Engine e : kAllEngines) {
      const auto out = conv_forward(e, input, kernel, cfg, policy, &table);
      r.expect(out.shape() == shape && all_equal(out, 48.0), [&] {
        return std::string(to_string(e)) + "/" + to_string(mode) + " output is not all 48";
      });
      CapsuleTensor<double> ones(1, 1, 2, 2, pose, std::vector<double>(4 * 27, 1.0));
      const auto grads = conv_backward(e, input, kernel, ones, cfg, policy, &table);
      r.expect(all_equal(grads.kernel, 12.0), [&] {
        return std::string(to_string(e)) + "/" + to_string(mode) + " kernel gradient is not all 12";
      });
    }
  }
  return r;
}

inline SuiteResult check_forward_oracle(const CheckOptions& opts, const Tolerances& tol) {
  SuiteResult r{"forward oracle equivalence"};
  const ExecPolicy ref{2, AccumulationMode::reference}, opt{2, AccumulationMode::optimized};
  for (std::size_t n = 0; n < opts.instances; ++n) {
    const auto pb = random_problem<double>(opts.seed, n);
    const auto& cfg = pb.shape.cfg;
    const auto expected = naive_forward(pb.input, pb.kernel, cfg);
    const auto table = build_index_table(pb.input, pb.kernel, cfg);

    r.expect(detail::same(accel_forward(pb.input, pb.kernel, cfg, ref), expected),
             [&] { return detail::describe("accel reference != naive", opts.seed, n); });
    r.expect(detail::same(indexed_forward(pb.input, pb.kernel, table, ref), expected),
             [&] { return detail::describe("indexed reference != naive", opts.seed, n); });
    const double e1 = relative_error<double>(
        accel_forward(pb.input, pb.kernel, cfg, opt).data(), expected.data());
    r.expect(e1 <= tol.optimized,
             [&] { return detail::describe("accel optimized vs naive", opts.seed, n, e1); });
    const double e2 = relative_error<double>(
        indexed_forward(pb.input, pb.kernel, table, opt).data(), expected.data());
    r.expect(e2 <= tol.optimized,
             [&] { return detail::describe("indexed optimized vs naive", opts.seed, n, e2); });

    const auto pf = random_problem<float>(opts.seed, n);
    const auto expected_f = naive_forward(pf.input, pf.kernel, cfg);
    const double e3 = relative_error<float>(
        accel_forward(pf.input, pf.kernel, cfg, opt).data(), expected_f.data());
    r.expect(e3 <= tol.single,
             [&] { return detail::describe("f32 accel optimized vs naive", opts.seed, n, e3); });
    const double e4 = relative_error<float>(
        indexed_forward(pf.input, pf.kernel, build_index_table(pf.input, pf.kernel, cfg), opt)
            .data(),
        expected_f.data());
    r.expect(e4 <= tol.single,
             [&] { return detail::describe("f32 indexed optimized vs naive", opts.seed, n, e4); });
  }
  return r;
}

inline SuiteResult check_backward_oracle(const CheckOptions& opts, const Tolerances& tol) {
  SuiteResult r{"backward oracle equivalence"};
  const ExecPolicy ref{2, AccumulationMode::reference}, opt{2, AccumulationMode::optimized};
  for (std::size_t n = 0; n < opts.gradient_instances; ++n) {
    const auto pb = random_problem<double>(opts.seed, n);
    const auto& cfg = pb.shape.cfg;
    const auto dout = naive_forward(pb.input, pb.kernel, cfg);
    const auto expected = naive_backward(pb.input, pb.kernel, dout, cfg);
    const auto table = build_index_table(pb.input, pb.kernel, cfg);

    r.expect(detail::same(accel_backward(pb.input, pb.kernel, dout, cfg, ref), expected),
             [&] { return detail::describe("accel reference backward != naive", opts.seed, n); });
    const double e1 =
        detail::gradient_error(accel_backward(pb.input, pb.kernel, dout, cfg, opt), expected);
    r.expect(e1 <= tol.optimized,
             [&] { return detail::describe("accel optimized backward", opts.seed, n, e1); });
    for (auto policy : {ref, opt}) {
      const double e2 = detail::gradient_error(
          indexed_backward(pb.input, pb.kernel, dout, table, policy), expected);
      r.expect(e2 <= tol.optimized,
               [&] { return detail::describe("indexed backward", opts.seed, n, e2); });
    }
  }
  return r;
}

/// Analytic gradients of L = sum(O^2)/2 against central differences.
inline SuiteResult check_finite_differences(const CheckOptions& opts, const Tolerances& tol) {
  SuiteResult r{"gradients vs finite differences"};
  const ExecPolicy opt{2, AccumulationMode::optimized};
  for (std::size_t n = 0; n < opts.gradient_instances; ++n) {
    const auto pb = random_small_problem<double>(opts.seed, n);
    const auto& cfg = pb.shape.cfg;
    const auto out = naive_forward(pb.input, pb.kernel, cfg);
    const auto naive = naive_backward(pb.input, pb.kernel, out, cfg);
    const auto accel = accel_backward(pb.input, pb.kernel, out, cfg, opt);

    const auto fd_kernel = finite_diff_grad<double>(
        [&](std::span<const double> k) {
          ConvKernel<double> kernel(pb.kernel.out_channels(), pb.kernel.in_channels(),
                                    pb.kernel.k_h(), pb.kernel.k_w(), pb.kernel.pose(),
                                    std::vector<double>(k.begin(), k.end()));
          return half_squared_norm<double>(naive_forward(pb.input, kernel, cfg).data());
        },
        pb.kernel.data(), kFiniteDifferenceStep);
    const auto fd_input = finite_diff_grad<double>(
        [&](std::span<const double> x) {
          CapsuleTensor<double> input(pb.input.batch(), pb.input.channels(), pb.input.height(),
                                      pb.input.width(), pb.input.pose(),
                                      std::vector<double>(x.begin(), x.end()));
          return half_squared_norm<double>(naive_forward(input, pb.kernel, cfg).data());
        },
        pb.input.data(), kFiniteDifferenceStep);

    for (const auto* grads : {&naive, &accel}) {
      const char* name = grads == &naive ? "naive" : "accel";
      const double ek = relative_error<double>(grads->kernel.data(), fd_kernel);
      const double ei = relative_error<double>(grads->input.data(), fd_input);
      r.expect(ek <= tol.gradient, [&] {
        return detail::describe((std::string(name) + " kernel gradient").c_str(), opts.seed, n, ek);
      });
      r.expect(ei <= tol.gradient, [&] {
        return detail::describe((std::string(name) + " input gradient").c_str(), opts.seed, n, ei);
      });
    }
  }
  return r;
}

inline SuiteResult check_adjointness(const CheckOptions& opts, const Tolerances& tol) {
  SuiteResult r{"adjoint identities"};
  for (std::size_t n = 0; n < opts.adjoint_instances; ++n) {
    const auto pb = random_problem<double>(opts.seed + 1, n);
    const auto g = make_geometry(pb.input, pb.kernel, pb.shape.cfg);
    Rng rng(instance_seed(opts.seed + 2, n));

    std::vector<double> y(g.batch * g.positions() * g.column_length());
    fill_uniform<double>(y, rng);
    const auto cols = capsule_im2col(pb.input, g);
    CapsuleTensor<double> back(g.batch, g.in_channels, g.height, g.width, g.input_pose());
    capsule_col2im_into<double>(y, g, back.data());
    const double e1 = relative_difference(inner_product<double>(cols.data, y),
                                          inner_product<double>(pb.input.data(), back.data()));
    r.expect(e1 <= tol.adjoint,
             [&] { return detail::describe("im2col/col2im", opts.seed + 1, n, e1); });

    std::vector<double> z(cols.data.size() * g.out_channels);
    fill_uniform<double>(z, rng);
    const auto extended = input_extend(cols, g.out_channels);
    const auto reduced = input_reduce<double>(z, g);
    const double e2 = relative_difference(inner_product<double>(extended.data, z),
                                          inner_product<double>(cols.data, reduced.data));
    r.expect(e2 <= tol.adjoint,
             [&] { return detail::describe("input_extend/input_reduce", opts.seed + 1, n, e2); });
  }
  return r;
}

/// Repeated runs across worker counts must agree bit for bit.
inline SuiteResult check_determinism(const CheckOptions& opts) {
  SuiteResult r{"determinism across runs and worker counts"};
  for (std::size_t n = 0; n < opts.determinism_instances; ++n) {
    const auto pb = random_problem<double>(opts.seed + 3, n);
    const auto& cfg = pb.shape.cfg;
    const auto table = build_index_table(pb.input, pb.kernel, cfg);
    const auto dout = naive_forward(pb.input, pb.kernel, cfg);
    for (Engine e : kAllEngines)
      for (auto mode : {AccumulationMode::reference, AccumulationMode::optimized}) {
        std::optional<CapsuleTensor<double>> first_out;
        std::optional<ConvGradients<double>> first_grad;
        for (std::size_t workers : opts.worker_counts)
          for (int repeat = 0; repeat < 2; ++repeat) {
            const ExecPolicy policy{workers, mode};
            auto out = conv_forward(e, pb.input, pb.kernel, cfg, policy, &table);
            auto grad = conv_backward(e, pb.input, pb.kernel, dout, cfg, policy, &table);
            if (!first_out) {
              first_out = std::move(out);
              first_grad = std::move(grad);
              continue;
            }
            r.expect(detail::same(*first_out, out) && detail::same(*first_grad, grad), [&] {
              return detail::describe((std::string(to_string(e)) + "/" + to_string(mode) +
                                       " differs at " + std::to_string(workers) + " workers")
                                          .c_str(),
                                      opts.seed + 3, n);
            });
          }
      }
  }
  return r;
}

/// Depth-3 network whose every dimension is at most 3.
inline NetworkConfig tiny_network_config() {
  NetworkConfig net;
  net.input = {1, 1, 5, 5, PoseDims{1, 2, 2}};
  LayerSpec a{2, 2, 1, 2, PoseDims{1, 2, 3}, ConvConfig{1, 0}, Engine::accel};
  LayerSpec b{2, 2, 2, 2, PoseDims{1, 3, 2}, ConvConfig{1, 1}, Engine::indexed};
  LayerSpec c{3, 3, 2, 1, PoseDims{1, 2, 2}, ConvConfig{2, 0}, Engine::naive};
  net.layers = {a, b, c};
  net.seed = 7;
  return net;
}

/// Cross-engine agreement on `net` and an end-to-end finite-difference check of the
/// tiny network over every parameter.
inline SuiteResult check_network(const NetworkConfig& net, const CheckOptions& opts,
                                 const Tolerances& tol) {
  SuiteResult r{"network engines and end-to-end gradients"};
  const ExecPolicy opt{2, AccumulationMode::optimized};
  {
    Network<double> model(net);
    const auto x = random_input<double>(net, net.seed);
    model.set_engine(Engine::naive);
    const auto [expected, tape] = model.forward(x, opt);
    const auto expected_grads = model.backward(tape, expected, opt);
    for (Engine e : {Engine::accel, Engine::indexed}) {
      model.set_engine(e);
      const auto [out, t] = model.forward(x, opt);
      const double err = relative_error<double>(out.data(), expected.data());
      r.expect(err <= tol.optimized, [&] {
        return std::string("network forward ") + to_string(e) + " vs naive, error " +
               std::to_string(err);
      });
      const auto grads = model.backward(t, out, opt);
      double gerr = relative_error<double>(grads.input.data(), expected_grads.input.data());
      for (std::size_t l = 0; l < grads.kernels.size(); ++l)
        gerr = std::max(gerr, relative_error<double>(grads.kernels[l].data(),
                                                     expected_grads.kernels[l].data()));
      r.expect(gerr <= tol.optimized, [&] {
        return std::string("network backward ") + to_string(e) + " vs naive, error " +
               std::to_string(gerr);
      });
    }
  }

  const auto tiny = tiny_network_config();
  Network<double> model(tiny);
  const auto x = random_input<double>(tiny, opts.seed);
  const auto [out, tape] = model.forward(x, opt);
  const auto grads = model.backward(tape, out, opt);
  for (std::size_t l = 0; l < model.parameters().size(); ++l) {
    const auto fd = finite_diff_grad<double>(
        [&](std::span<const double> k) {
          Network<double> probe = model;
          std::copy(k.begin(), k.end(), probe.parameters()[l].data().begin());
          return half_squared_norm<double>(probe.forward(x, opt).first.data());
        },
        model.parameters()[l].data(), kFiniteDifferenceStep);
    const double err = relative_error<double>(grads.kernels[l].data(), fd);
    r.expect(err <= tol.network_gradient, [&] {
      return "tiny network layer " + std::to_string(l + 1) + " kernel gradient error " +
             std::to_string(err);
    });
  }
  const auto fd_x = finite_diff_grad<double>(
      [&](std::span<const double> v) {
        CapsuleTensor<double> probe(x.batch(), x.channels(), x.height(), x.width(), x.pose(),
                                    std::vector<double>(v.begin(), v.end()));
        return half_squared_norm<double>(model.forward(probe, opt).first.data());
      },
      x.data(), kFiniteDifferenceStep);
  const double err = relative_error<double>(grads.input.data(), fd_x);
  r.expect(err <= tol.network_gradient,
           [&] { return "tiny network input gradient error " + std::to_string(err); });
  return r;
}

inline CheckReport run_check_suites(const AppConfig& cfg) {
  const auto tol = Tolerances::from(cfg.check);
  CheckReport report;
  report.suites.push_back(check_golden());
  report.suites.push_back(check_forward_oracle(cfg.check, tol));
  report.suites.push_back(check_backward_oracle(cfg.check, tol));
  report.suites.push_back(check_finite_differences(cfg.check, tol));
  report.suites.push_back(check_adjointness(cfg.check, tol));
  report.suites.push_back(check_determinism(cfg.check));
  report.suites.push_back(check_network(cfg.network, cfg.check, tol));
  return report;
}

}  // namespace capsconv

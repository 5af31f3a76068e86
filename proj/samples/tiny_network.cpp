// Forward and backward through the default network with each engine.

#include <chrono>
#include <iostream>

#include "capsconv/capsconv.hpp"

int main() {
  using namespace capsconv;
  const auto cfg = default_network_config();
  Network<float> net(cfg);
  const auto x = random_input<float>(cfg, cfg.seed);
  const ExecPolicy policy{4, AccumulationMode::optimized};

  for (Engine e : kAllEngines) {
    net.set_engine(e);
    const auto start = std::chrono::steady_clock::now();
    const auto [out, tape] = net.forward(x, policy);
    const auto grads = net.backward(tape, out, policy);
    const std::chrono::duration<double, std::milli> took = std::chrono::steady_clock::now() - start;
    std::cout << to_string(e) << ": loss " << half_squared_norm<float>(out.data()) << ", "
              << took.count() << " ms\n";
  }
}

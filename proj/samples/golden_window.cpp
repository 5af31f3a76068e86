// All-ones 5x5 grid of 3x3x3 capsules convolved with an all-ones 4x4 kernel.
// Every output entry is 4*4 taps * 3 inner products = 48.

#include <iostream>
#include <vector>

#include "capsconv/capsconv.hpp"

int main() {
  using namespace capsconv;
  const PoseDims pose{3, 3, 3};
  CapsuleTensor<double> input(1, 1, 5, 5, pose, std::vector<double>(5 * 5 * 27, 1.0));
  ConvKernel<double> kernel(1, 1, 4, 4, pose, std::vector<double>(4 * 4 * 27, 1.0));
  const ConvConfig cfg{};

  const auto naive = naive_forward(input, kernel, cfg);
  const auto accel = accel_forward(input, kernel, cfg, {2, AccumulationMode::optimized});
  const auto table = build_index_table(input, kernel, cfg);
  const auto indexed = indexed_forward(input, kernel, table, {2, AccumulationMode::optimized});

  const auto s = naive.shape();
  std::cout << "output shape:";
  for (auto d : s) std::cout << ' ' << d;
  std::cout << "\nfirst entry: " << naive.data()[0] << "\n";
  std::cout << "index table: " << table.size() << " pose products\n";
  std::cout << "engines agree: " << std::boolalpha << (naive == accel && naive == indexed) << "\n";

  CapsuleTensor<double> ones(1, 1, 2, 2, pose, std::vector<double>(4 * 27, 1.0));
  const auto grads = accel_backward(input, kernel, ones, cfg);
  std::cout << "kernel gradient entry: " << grads.kernel.data()[0] << "\n";
}

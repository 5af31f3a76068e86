#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>

#include "capsconv/tensor.hpp"

namespace capsconv {

/// Normwise relative error max|a - b| / max(max|a|, max|b|). Two all-zero
/// buffers compare as 0; buffers of different length compare as +inf.
template <Scalar T>
double relative_error(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    if (std::isnan(x) || std::isnan(y)) return std::numeric_limits<double>::infinity();
    diff = std::max(diff, std::abs(x - y));
    scale = std::max({scale, std::abs(x), std::abs(y)});
  }
  if (diff == 0) return 0;
  return scale == 0 ? std::numeric_limits<double>::infinity() : diff / scale;
}

/// Exact equality of every scalar (+0 and -0 compare equal).
template <Scalar T>
bool exactly_equal(std::span<const T> a, std::span<const T> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

/// Inner product with compensated (Neumaier) summation in double.
template <Scalar T>
double inner_product(std::span<const T> a, std::span<const T> b) {
  double sum = 0, carry = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    const double term = static_cast<double>(a[i]) * static_cast<double>(b[i]);
    const double t = sum + term;
    carry += std::abs(sum) >= std::abs(term) ? (sum - t) + term : (term - t) + sum;
    sum = t;
  }
  return sum + carry;
}

inline double relative_difference(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0 ? 0 : std::abs(a - b) / scale;
}

}  // namespace capsconv

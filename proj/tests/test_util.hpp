#pragma once

#include "unetvl/ops.hpp"
#include "unetvl/prng.hpp"

namespace uvl::testing {

inline Tensor randn(const Shape& s, std::uint64_t seed, double std = 1.0) {
  Prng rng(seed);
  return normal_tensor(s, std, rng);
}

// Weighted sum with distinct random weights per output element.
inline Tensor probe(const Tensor& y, std::uint64_t seed = 99) { return sum(mul(y, randn(y.shape(), seed))); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace uvl::testing

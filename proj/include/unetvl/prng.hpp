#pragma once

#include <cstdint>
#include <vector>

#include "unetvl/tensor.hpp"

namespace uvl {

/// Counter-based splittable generator. Sample i of a stream is a pure
/// function of (key, i), so identical seeds give bit-identical sequences
/// and split streams never share keys with their parent.
class Prng {
 public:
  explicit Prng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal (Box-Muller, no cached pair).
  double normal();
  /// Normal(0, std) resampled until within +-clip_sigmas * std.
  double truncated_normal(double std, double clip_sigmas = 2.0);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Independent child stream `stream_id`.
  Prng split(std::uint64_t stream_id) const;

  void shuffle(std::vector<std::size_t>& items);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  Prng(std::uint64_t key, std::uint64_t counter, bool) : key_(key), counter_(counter) {}
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Truncated-normal (clipped at +-2 std) leaf tensor.
Tensor trunc_normal_tensor(const Shape& shape, double std, Prng& rng, DType dtype = DType::F64);
Tensor normal_tensor(const Shape& shape, double std, Prng& rng, DType dtype = DType::F64);
Tensor uniform_tensor(const Shape& shape, double lo, double hi, Prng& rng, DType dtype = DType::F64);

}  // namespace uvl

#include "unetvl/prng.hpp"

#include <cmath>
#include <numbers>

namespace uvl {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Prng::Prng(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}

std::uint64_t Prng::next_u64() {
  const std::uint64_t c = counter_++;
  return mix64(key_ ^ mix64(c * kGolden + 0x632BE59BD9B4E019ULL));
}

double Prng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Prng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Prng::truncated_normal(double std, double clip_sigmas) {
  for (;;) {
    const double z = normal();
    if (std::abs(z) <= clip_sigmas) return z * std;
  }
}

std::uint64_t Prng::below(std::uint64_t n) {
  if (n == 0) return 0;
  // Lemire's multiply-high with rejection
  for (;;) {
    const unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    const std::uint64_t low = static_cast<std::uint64_t>(m);
    if (low >= n || low >= (0 - n) % n) return static_cast<std::uint64_t>(m >> 64);
  }
}

Prng Prng::split(std::uint64_t stream_id) const {
  return Prng(mix64(key_ ^ mix64((stream_id + 1) * 0xD1B54A32D192ED03ULL)), 0, true);
}

void Prng::shuffle(std::vector<std::size_t>& items) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(below(i));
    std::swap(items[i - 1], items[j]);
  }
}

Tensor trunc_normal_tensor(const Shape& shape, double std, Prng& rng, DType dtype) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.truncated_normal(std);
  return Tensor(shape, std::move(v), dtype);
}

Tensor normal_tensor(const Shape& shape, double std, Prng& rng, DType dtype) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal() * std;
  return Tensor(shape, std::move(v), dtype);
}

Tensor uniform_tensor(const Shape& shape, double lo, double hi, Prng& rng, DType dtype) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor(shape, std::move(v), dtype);
}

}  // namespace uvl

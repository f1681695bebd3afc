#include "dpnet/rng.hpp"

#include "dpnet/common.hpp"

namespace dpnet {
namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t sm = seed;
  for (auto& w : s_) w = splitmix64(sm);
}

std::uint64_t Rng::next_u64() {
  std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
  std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double a, double b) { return a + (b - a) * uniform(); }

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw Error("uniform_index: n must be positive");
  std::uint64_t bound = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= bound);
  return static_cast<std::size_t>(x % n);
}

std::uint64_t Rng::derive(std::uint64_t master, std::uint64_t stream,
                          std::uint64_t index) {
  std::uint64_t x = master ^ (0x9e3779b97f4a7c15ull * (stream + 1));
  splitmix64(x);
  x ^= 0xbf58476d1ce4e5b9ull * (index + 1);
  return splitmix64(x);
}

}  // namespace dpnet

// Seeded generator with a platform-independent draw sequence.
// xoshiro256++ seeded through splitmix64; uniforms use the top 53 bits so the
// same seed yields the same doubles on every platform (std:: distributions
// do not guarantee that).
#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace dpnet {

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  // Uniform in [0,1).
  double uniform();
  // Uniform in [a,b).
  double uniform(double a, double b);
  // Uniform integer in [0,n); n must be
  // nonzero. Unbiased via rejection.
  std::size_t uniform_index(std::size_t n);

  // Fisher-Yates with this generator (std::shuffle is implementation-defined).
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::array<std::uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<std::uint64_t, 4>& s) { s_ = s; }

  // Stable child seed for (stream, index) under a master seed; used to make
  // per-sample generation order-independent.
  static std::uint64_t derive(std::uint64_t master, std::uint64_t stream,
                              std::uint64_t index);

 private:
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace dpnet

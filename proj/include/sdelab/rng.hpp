#pragma once

#include <cstdint>
#include <vector>

namespace sdelab {

// splitmix64 finalizer; also the documented seed-mix function used everywhere
// a derived stream is needed: stream = Rng(mix_seed(master, index)).
std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// Deterministic xoshiro256++ stream with Box-Muller normals. No global state;
// every consumer owns its stream, so sequences are reproducible bit-for-bit
// regardless of platform or standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                     // [0, 1)
  double uniform(double lo, double hi);
  int uniform_int(int n);               // [0, n)
  double normal();                      // N(0, 1)
  double normal(double mean, double sd);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::uint64_t s_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sdelab

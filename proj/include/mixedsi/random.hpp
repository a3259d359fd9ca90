#pragma once

#include <cstdint>
#include <random>

namespace mixedsi {

// Counter-based seed derivation: each (master, stream, tag) triple maps to an
// independent engine seed, so replicate b can be generated on any worker in
// any order and still produce the same numbers.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stream tags keep the data-generation, bootstrap and Monte Carlo streams of
/// one simulation replicate apart.
enum class StreamTag : std::uint64_t { Bootstrap = 1, MonteCarlo = 2, Scenario = 3, Auxiliary = 4 };

inline std::uint64_t derive_seed(std::uint64_t master, StreamTag tag, std::uint64_t index) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ static_cast<std::uint64_t>(tag));
  return splitmix64(h ^ splitmix64(index));
}

class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : engine_(seed) {}

  double operator()() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace mixedsi

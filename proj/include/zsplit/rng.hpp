#pragma once

// Named, independently seeded random substreams. A stream is identified by
// (study seed, path index, stream kind); any path of a study can be
// regenerated in isolation.

#include <array>
#include <cstdint>
#include <random>

namespace zsplit {

enum class Stream : std::uint64_t {
  initial = 1,      // X_0
  signal = 2,       // dw
  observation = 3,  // dv
  exponential = 4,  // Cox accumulator thresholds
  particles = 5,    // particle oracle
  prior = 6,        // prior Monte-Carlo reference
};

struct PathSeed {
  std::uint64_t seed = 0;
  std::uint64_t path = 0;

  friend bool operator==(const PathSeed&, const PathSeed&) = default;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

class RandomStream {
 public:
  RandomStream(PathSeed id, Stream kind) : engine_(make_seed(id, kind)) {}

  double normal() { return normal_(engine_); }
  double normal(double mean, double sd) { return mean + sd * normal_(engine_); }
  double exponential() { return exponential_(engine_); }
  double uniform() { return uniform_(engine_); }

  std::mt19937_64& engine() { return engine_; }

 private:
  static std::seed_seq make_seed(PathSeed id, Stream kind) {
    std::uint64_t state = id.seed;
    std::uint64_t a = detail::splitmix64(state);
    state ^= id.path * 0xd1b54a32d192ed03ULL;
    std::uint64_t b = detail::splitmix64(state);
    state ^= static_cast<std::uint64_t>(kind) * 0x8cb92ba72f3d8dd7ULL;
    std::uint64_t c = detail::splitmix64(state);
    std::array<std::uint32_t, 6> words{
        static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
        static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
        static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)};
    return std::seed_seq(words.begin(), words.end());
  }

  // std::seed_seq is not copyable, so construct the engine through a helper.
  struct Engine : std::mt19937_64 {
    explicit Engine(std::seed_seq&& s) : std::mt19937_64(s) {}
  };

  Engine engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::exponential_distribution<double> exponential_{1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace zsplit

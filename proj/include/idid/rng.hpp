#pragma once

// Counter-based seeding: every (master seed, replication, variable) triple maps
// to its own engine, so draws never depend on scheduling order.

#include <cstdint>
#include <random>

namespace idid {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ splitmix64(a + 0x632BE59BD9B4E019ULL));
  h = splitmix64(h ^ splitmix64(b + 0x8CB92BA72F3D8DD7ULL));
  return h;
}

// Variable tags for simulation substreams.
enum class Stream : std::uint64_t {
  Z = 1, X, U0, D0, Y0, U1, D1, Y1, T, D, Y, Folds, Bootstrap, Shuffle,
};

class RngStream {
 public:
  explicit RngStream(std::uint64_t master_seed) : master_(master_seed) {}

  std::uint64_t master_seed() const { return master_; }

  std::mt19937_64 engine(std::uint64_t rep, Stream tag) const {
    return std::mt19937_64(derive_seed(master_, rep, static_cast<std::uint64_t>(tag)));
  }

  std::uint64_t child_seed(std::uint64_t rep, Stream tag) const {
    return derive_seed(master_, rep, static_cast<std::uint64_t>(tag));
  }

 private:
  std::uint64_t master_;
};

}  // namespace idid

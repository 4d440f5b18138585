#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ckaa {

// Seedable generator that can be split into independent named streams.
// Splitting depends only on the seed and the stream key, never on how many
// draws the parent has made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  Rng split(std::string_view stream) const;
  Rng split(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }

  double normal();
  double uniform();
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace ckaa

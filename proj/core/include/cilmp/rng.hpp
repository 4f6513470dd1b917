#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace cilmp {

// Seeded generator shared by every stochastic routine. Streams derived with
// fork() are independent of how many draws the parent has made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  Rng fork(std::uint64_t stream) const;

  double normal(double mean = 0.0, double stddev = 1.0);
  double uniform(double lo = 0.0, double hi = 1.0);
  std::size_t index(std::size_t n);
  std::vector<double> normal_vector(std::size_t n, double stddev = 1.0);
  void shuffle(std::span<std::size_t> items);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace cilmp

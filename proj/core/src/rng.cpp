#include "cilmp/rng.hpp"

#include <algorithm>

namespace cilmp {

Rng Rng::fork(std::uint64_t stream) const {
  // splitmix64 finaliser over (seed, stream)
  std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return Rng(z ^ (z >> 31));
}

double Rng::normal(double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  return dist(engine_);
}

double Rng::uniform(double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(engine_);
}

std::size_t Rng::index(std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(engine_);
}

std::vector<double> Rng::normal_vector(std::size_t n, double stddev) {
  std::vector<double> out(n);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& x : out) x = dist(engine_);
  return out;
}

void Rng::shuffle(std::span<std::size_t> items) { std::shuffle(items.begin(), items.end(), engine_); }

}  // namespace cilmp

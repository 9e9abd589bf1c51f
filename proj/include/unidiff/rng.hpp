#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>

namespace unidiff {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

// Mixes a master seed with stream identifiers. Order-sensitive; used to give
// every (sample, variant) or (run, epoch) its own independent stream.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> parts);
std::uint64_t derive_seed(std::uint64_t master, std::string_view label);

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform();                        // [0, 1)
  double uniform(double lo, double hi);    // [lo, hi)
  std::size_t index(std::size_t n);        // [0, n)
  double normal();
  double beta(double a, double b);
  bool bernoulli(double p);
  void fill_normal(std::span<double> out);

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace unidiff

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace xdrec {

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t splitmix64(std::uint64_t x);

// Seedable, splittable generator. Only the engine comes from <random>; all
// derived draws are implemented here so sequences are identical across
// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  [[nodiscard]] std::uint64_t seed() const { return seed_; }

  // Independent substream keyed by a label (user id, prompt hash, ...).
  [[nodiscard]] Rng split(std::string_view key) const;
  [[nodiscard]] Rng split(std::uint64_t key) const;

  std::uint64_t next() { return engine_(); }

  // Unbiased integer in [0, n). n must be > 0.
  std::uint64_t uniform(std::uint64_t n);

  // Double in [0, 1) with 53 bits of precision.
  double uniform01();

  double normal();

  bool bernoulli(double p) { return p > 0.0 && uniform01() < p; }

  template <class T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform(i));
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace xdrec

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vloc {

// splitmix64; used to derive independent sub-seeds from one master seed.
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t salt_of(std::string_view tag) {
  // FNV-1a over the tag so call sites can name their stream.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  return h;
}

// Seeded generator with the handful of draws the pipeline needs.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  Rng(std::uint64_t seed, std::string_view tag) : gen_(split_seed(seed, salt_of(tag))) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) { // inclusive
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen_);
  }
  std::mt19937_64& engine() { return gen_; }

private:
  std::mt19937_64 gen_;
};

} // namespace vloc

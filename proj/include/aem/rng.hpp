#pragma once

// Deterministic randomness. Every random decision in the library flows from a
// single master seed through *named substreams* ("generation", "split",
// "init", "bootstrap.<i>", ...), so each stage can be re-run or re-ordered
// without perturbing the others, and parallel schedules reproduce the
// sequential results exactly.
//
// The variate generators (uniform, normal, discrete) are written out here
// instead of using <random> distributions because the standard distributions
// are implementation-defined: the same engine stream can yield different
// values across standard libraries, which would break the byte-identical
// reproducibility contract.

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "aem/errors.hpp"

namespace aem {

// FNV-1a 64-bit string hash (stream naming).
constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// splitmix64 finalizer: cheap, well-distributed 64-bit mixing.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Seed for the substream `name` of `master`.
constexpr std::uint64_t substream_seed(std::uint64_t master, std::string_view name) {
  return splitmix64(master ^ fnv1a64(name));
}

// Indexed substream: substream_seed(master, "bootstrap", i) names replica i.
constexpr std::uint64_t substream_seed(std::uint64_t master, std::string_view name,
                                       std::uint64_t index) {
  return splitmix64(substream_seed(master, name) ^ splitmix64(index + 0x9e3779b97f4a7c15ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  Rng(std::uint64_t master, std::string_view name) : eng_(substream_seed(master, name)) {}
  Rng(std::uint64_t master, std::string_view name, std::uint64_t index)
      : eng_(substream_seed(master, name, index)) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (no cached spare: keeps the stream
  // position a pure function of the number of calls).
  double normal() {
    double u1 = static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // Uniform integer in [lo, hi] inclusive, exact (mask-and-reject).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw validation_error("uniform_int: empty range");
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo);
    if (range == 0) return lo;
    std::uint64_t mask = range;
    mask |= mask >> 1;
    mask |= mask >> 2;
    mask |= mask >> 4;
    mask |= mask >> 8;
    mask |= mask >> 16;
    mask |= mask >> 32;
    std::uint64_t draw;
    do {
      draw = eng_() & mask;
    } while (draw > range);
    return lo + static_cast<std::int64_t>(draw);
  }

  // Index sampled proportionally to nonnegative weights (need not sum to 1).
  std::size_t discrete(std::span<const double> weights) {
    if (weights.empty()) throw validation_error("discrete: empty weights");
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw validation_error("discrete: negative weight");
      total += w;
    }
    if (!(total > 0.0)) throw validation_error("discrete: weights sum to zero");
    double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.size() - 1;
  }

  // In-place Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in random order.
  std::vector<std::int32_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw validation_error("sample_without_replacement: k > n");
    std::vector<std::int32_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::int32_t>(i);
    // Partial Fisher-Yates: only the first k positions need settling.
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = static_cast<std::size_t>(
          uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n) - 1));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace aem

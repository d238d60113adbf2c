#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace longseg {

/// Counter-based pseudo-random generator built on the SplitMix64 finalizer.
///
/// The i-th raw output of a stream with key k is
///     mix64(k + i * 0x9E3779B97F4A7C15),
/// where mix64 is the SplitMix64 bit finalizer. Streams are cheap to fork:
/// derive() hashes a path of integers into a new key, so independent
/// substreams (per subject, per time point, per purpose) can be drawn from a
/// single user-facing seed without any shared state. Everything here is pure
/// integer arithmetic, so streams reproduce bit-identically across platforms
/// and can be reimplemented in any language.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  static std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  /// Fork a substream: the key is the running hash of (seed, path...).
  static CounterRng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t key = mix64(seed + 0x9E3779B97F4A7C15ULL);
    for (std::uint64_t p : path) {
      key = mix64(key ^ (p + 0x9E3779B97F4A7C15ULL));
    }
    return CounterRng(key);
  }

  std::uint64_t next_u64() {
    counter_ += 0x9E3779B97F4A7C15ULL;
    return mix64(key_ + counter_);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in (0, 1]; never zero, safe under log().
  double next_double_open() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; pairs are cached.
  double next_gaussian() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    const double u1 = next_double_open();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace longseg

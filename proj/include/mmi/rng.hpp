#pragma once

#include <array>
#include <cstdint>
#include <limits>

namespace mmi {

/// Philox4x32-10 counter-based generator (Salmon et al., "Parallel random
/// numbers: as easy as 1, 2, 3").
///
/// A stream is a 64-bit key; every draw encrypts the next value of a 128-bit
/// counter under that key and hands out the four 32-bit output words in
/// order. `split(id)` derives an independent child stream whose key is the
/// first two output words of encrypting (id, 0x5eed5eed, 0, 0) under the
/// parent key, so the whole stream tree is a pure function of the root seed.
///
/// Doubles use 53 bits from two consecutive words; normals use Box-Muller on
/// two doubles and cache the second variate.
class Philox {
 public:
  using result_type = std::uint32_t;

  explicit Philox(std::uint64_t seed = 0) : key_{static_cast<std::uint32_t>(seed),
                                                 static_cast<std::uint32_t>(seed >> 32)} {}

  [[nodiscard]] Philox split(std::uint64_t id) const;

  /// Encrypts the current counter, then advances it.
  std::array<std::uint32_t, 4> next_block();

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal.
  double normal();
  /// Uniform integer in [lo, hi).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p) { return uniform() < p; }

  // UniformRandomBitGenerator, so std::shuffle and friends accept it.
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return next_u32(); }

  [[nodiscard]] std::uint64_t key() const {
    return static_cast<std::uint64_t>(key_[0]) | (static_cast<std::uint64_t>(key_[1]) << 32);
  }

  static std::array<std::uint32_t, 4> encrypt(std::array<std::uint32_t, 4> counter,
                                              std::array<std::uint32_t, 2> key);

 private:
  std::array<std::uint32_t, 2> key_;
  std::array<std::uint32_t, 4> counter_{0, 0, 0, 0};
  std::array<std::uint32_t, 4> buffer_{};
  int buffered_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mmi

#ifndef MUMLOC_RNG_HPP
#define MUMLOC_RNG_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace mumloc {

/// Philox4x32-10 counter-based generator (Salmon et al., Random123).
///
/// Each output block is a pure function of (key, counter), so any stream can
/// be regenerated in any language from the seed alone. The key carries the
/// 64-bit seed; counter words 2 and 3 select a (purpose, index) stream and
/// words 0-1 count blocks within it.
class Philox4x32 {
 public:
  using Block = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Block generate(Block ctr, Key key) {
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = std::uint64_t(kM0) * ctr[0];
      const std::uint64_t p1 = std::uint64_t(kM1) * ctr[2];
      const std::uint32_t hi0 = std::uint32_t(p0 >> 32), lo0 = std::uint32_t(p0);
      const std::uint32_t hi1 = std::uint32_t(p1 >> 32), lo1 = std::uint32_t(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
      key[0] += kW0;
      key[1] += kW1;
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kM0 = 0xD2511F53u;
  static constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kW0 = 0x9E3779B9u;
  static constexpr std::uint32_t kW1 = 0xBB67AE85u;
};

/// Fixed stream purposes. Values are part of the on-disk reproducibility
/// contract; do not renumber.
enum class StreamPurpose : std::uint32_t {
  Scene = 1,
  Drift = 2,
  Noise = 3,
  Helix = 4,
  Solver = 5,
  Test = 99,
};

/// Sequential view of one Philox stream with the usual distributions.
///
/// uniform():  53-bit double in [0, 1) from two words, high word first.
/// uniform_int(lo, hi): inclusive, by rejection on one word.
/// normal():   Box-Muller, one output per two uniforms.
/// poisson(mu): multiplication method below 10, PTRS (Hormann 1993) above.
class Rng {
 public:
  Rng(std::uint64_t seed, StreamPurpose purpose, std::uint32_t index)
      : key_{std::uint32_t(seed), std::uint32_t(seed >> 32)},
        ctr_{0u, 0u, std::uint32_t(purpose), index} {}

  std::uint32_t next_u32() {
    if (pos_ == 4) {
      block_ = Philox4x32::generate(ctr_, key_);
      if (++ctr_[0] == 0) ++ctr_[1];
      pos_ = 0;
    }
    return block_[pos_++];
  }

  double uniform() {
    const std::uint64_t hi = next_u32();
    const std::uint64_t lo = next_u32();
    return double(((hi << 32) | lo) >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {
    const std::uint64_t range = std::uint64_t(std::int64_t(hi) - lo) + 1;
    const std::uint64_t limit = (std::uint64_t(1) << 32) - ((std::uint64_t(1) << 32) % range);
    for (;;) {
      const std::uint64_t u = next_u32();
      if (u < limit) return int(std::int64_t(lo) + std::int64_t(u % range));
    }
  }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::int64_t poisson(double mu) {
    if (!(mu > 0.0)) return 0;
    if (mu < 10.0) {
      const double limit = std::exp(-mu);
      std::int64_t k = 0;
      double prod = uniform();
      while (prod > limit) {
        ++k;
        prod *= uniform();
      }
      return k;
    }
    const double slam = std::sqrt(mu);
    const double loglam = std::log(mu);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double invalpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    for (;;) {
      const double u = uniform() - 0.5;
      const double v = uniform();
      const double us = 0.5 - std::abs(u);
      const auto k = std::int64_t(std::floor((2.0 * a / us + b) * u + mu + 0.43));
      if (us >= 0.07 && v <= vr) return k;
      if (k < 0 || (us < 0.013 && v > us)) continue;
      if (std::log(v) + std::log(invalpha) - std::log(a / (us * us) + b) <=
          -mu + double(k) * loglam - std::lgamma(double(k) + 1.0)) {
        return k;
      }
    }
  }

 private:
  Philox4x32::Key key_;
  Philox4x32::Block ctr_;
  Philox4x32::Block block_{};
  int pos_ = 4;
};

}  // namespace mumloc

#endif  // MUMLOC_RNG_HPP

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>

namespace spinlab {

// All randomness in the project flows from one root seed through named
// derivation: derive_seed(seed, purpose, index) keys an independent SplitMix64
// stream. The construction is fixed (see README.md, "Randomness") so results
// reproduce bit-for-bit across platforms.

inline constexpr std::uint64_t kSplitMixGamma = 0x9E3779B97F4A7C15ull;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose,
                                    std::uint64_t index = 0) noexcept {
  std::uint64_t k = mix64(seed + kSplitMixGamma);
  k = mix64(k ^ fnv1a64(purpose));
  k = mix64(k ^ index);
  return k;
}

// SplitMix64 stream. Counter-based: output i depends only on (key, i).
class Rng {
 public:
  explicit Rng(std::uint64_t key) noexcept : state_(key) {}

  std::uint64_t next_u64() noexcept {
    state_ += kSplitMixGamma;
    return mix64(state_);
  }

  // uniform in [0, 1), 53-bit mantissa
  double next_double() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // standard normal via Box-Muller; caches the spare draw
  double next_normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - next_double();  // (0, 1]
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // inverse-CDF draw from a probability vector (assumed normalized)
  std::size_t next_categorical(std::span<const double> probs) noexcept {
    const double u = next_double();
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
      cum += probs[i];
      if (u < cum) return i;
    }
    return probs.empty() ? 0 : probs.size() - 1;
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace spinlab

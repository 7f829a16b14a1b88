#pragma once

// Counter-based random streams. Every random decision in the library is a
// pure function of a 64-bit key and a position, so results never depend on
// scheduling or on how many draws some unrelated component made.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <type_traits>
#include <utility>

namespace currseq {

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// FNV-1a, used to turn textual keys (lineage paths, labels) into tags.
constexpr std::uint64_t hash_text(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t key_tag(std::string_view tag) noexcept { return hash_text(tag); }

template <typename T>
  requires std::is_integral_v<T> || std::is_enum_v<T>
constexpr std::uint64_t key_tag(T tag) noexcept {
  return static_cast<std::uint64_t>(tag);
}

// Folds any mix of integer and textual tags into a child key.
template <typename... Tags>
constexpr std::uint64_t derive_key(std::uint64_t key, const Tags&... tags) noexcept {
  ((key = mix64(key ^ mix64(key_tag(tags) ^ 0xD1B54A32D192ED03ULL))), ...);
  return key;
}

// Value at `index` of the stream identified by `key`.
constexpr std::uint64_t stream_at(std::uint64_t key, std::uint64_t index) noexcept {
  return mix64(mix64(key) ^ (index * 0xD6E8FEB86659FD93ULL + 0x632BE59BD9B4E019ULL));
}

class KeyedRng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr KeyedRng(std::uint64_t key) noexcept : key_(key) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept { return stream_at(key_, counter_++); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform01() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  // Uniform on [lo, hi).
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }

  // Unbiased integer on [0, bound) (Lemire's multiply-and-reject). bound > 0.
  std::uint64_t below(std::uint64_t bound) noexcept {
    unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * bound;
    auto low = static_cast<std::uint64_t>(m);
    if (low < bound) {
      const std::uint64_t threshold = (0 - bound) % bound;
      while (low < threshold) {
        m = static_cast<unsigned __int128>((*this)()) * bound;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t position() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Fisher-Yates; the standard library's shuffle is implementation-defined, so
// reproducibility across toolchains needs our own.
template <typename T>
void shuffle_in_place(std::span<T> items, KeyedRng& rng) noexcept {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace currseq

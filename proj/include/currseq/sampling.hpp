#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "currseq/corpus.hpp"
#include "currseq/errors.hpp"
#include "currseq/rng.hpp"

namespace currseq {

// Uniform sample of k items without replacement from a stream of unknown
// length (Algorithm R). The reservoir is shuffled on take(), so the output
// order is itself uniformly random.
template <typename T>
class ReservoirSampler {
 public:
  ReservoirSampler(std::size_t k, std::uint64_t seed) : k_(k), rng_(derive_key(seed, "reservoir")) {
    sample_.reserve(k);
  }

  void observe(const T& item) {
    ++seen_;
    if (sample_.size() < k_) {
      sample_.push_back(item);
      return;
    }
    const auto j = rng_.below(seen_);
    if (j < k_) sample_[static_cast<std::size_t>(j)] = item;
  }

  std::uint64_t seen() const noexcept { return seen_; }
  std::size_t capacity() const noexcept { return k_; }

  std::vector<T> take() && {
    KeyedRng order(derive_key(rng_.key(), "order"));
    shuffle_in_place(std::span<T>(sample_), order);
    return std::move(sample_);
  }

 private:
  std::size_t k_;
  KeyedRng rng_;
  std::uint64_t seen_ = 0;
  std::vector<T> sample_;
};

// n distinct indices of [0, population), in reservoir order.
inline std::vector<std::size_t> sample_indices(std::size_t population, std::size_t n, std::uint64_t seed) {
  if (n > population) throw InsufficientPairs(population, n);
  ReservoirSampler<std::size_t> r(n, seed);
  for (std::size_t i = 0; i < population; ++i) r.observe(i);
  return std::move(r).take();
}

inline PairPool sample_uniform(const PairPool& pool, std::size_t n, std::uint64_t seed) {
  if (n > pool.size()) throw InsufficientPairs(pool.size(), n, std::string(to_string(pool.label)));
  ReservoirSampler<const DialoguePair*> r(n, seed);
  for (const auto& p : pool.pairs) r.observe(&p);
  PairPool out{pool.label, {}, pool.manifest};
  out.pairs.reserve(n);
  for (const auto* p : std::move(r).take()) out.pairs.push_back(*p);
  out.manifest.n = n;
  out.manifest.seed = seed;
  return out;
}

// Per-class counts for a mix set of n pairs: floor(n/3) each, remainder to
// short first, then medium.
constexpr std::array<std::size_t, 3> mix_counts(std::size_t n) noexcept {
  const std::size_t base = n / 3;
  const std::size_t rem = n % 3;
  return {base + (rem >= 1 ? 1 : 0), base + (rem >= 2 ? 1 : 0), base};
}

inline PairPool build_mix_set(const PairPool& short_pool, const PairPool& medium_pool, const PairPool& long_pool,
                              std::size_t n, std::uint64_t seed) {
  const auto counts = mix_counts(n);
  const std::array<const PairPool*, 3> pools{&short_pool, &medium_pool, &long_pool};
  PairPool out{PoolLabel::Mix, {}, short_pool.manifest};
  out.pairs.reserve(n);
  for (std::size_t c = 0; c < 3; ++c) {
    auto part = sample_uniform(*pools[c], counts[c], derive_key(seed, "mix-class", c));
    for (auto& p : part.pairs) out.pairs.push_back(std::move(p));
  }
  KeyedRng order(derive_key(seed, "mix-order"));
  shuffle_in_place(std::span<DialoguePair>(out.pairs), order);
  out.manifest.n = n;
  out.manifest.seed = seed;
  return out;
}

inline PairPool build_cross_set(const PairPool& cross_pool, std::size_t n, std::uint64_t seed) {
  auto out = sample_uniform(cross_pool, n, seed);
  out.label = PoolLabel::Cross;
  return out;
}

struct HoldoutSplit {
  PairPool holdout;
  PairPool remainder;
};

// Moves k uniformly chosen pairs into `holdout`; `remainder` keeps the rest
// in original order minus every pair whose text equals a held-out pair, so
// duplicated dialogue never straddles the split.
inline HoldoutSplit split_holdout(const PairPool& pool, std::size_t k, std::uint64_t seed) {
  HoldoutSplit split{sample_uniform(pool, k, seed), PairPool{pool.label, {}, pool.manifest}};
  std::unordered_set<std::string> held;
  held.reserve(k * 2);
  for (const auto& p : split.holdout.pairs) held.insert(p.key());
  split.remainder.pairs.reserve(pool.size() - k);
  for (const auto& p : pool.pairs) {
    if (!held.contains(p.key())) split.remainder.pairs.push_back(p);
  }
  split.remainder.manifest.n = split.remainder.pairs.size();
  return split;
}

// Drops every pair whose text appears in `excluded`.
inline PairPool without_keys(const PairPool& pool, const std::unordered_set<std::string>& excluded) {
  PairPool out{pool.label, {}, pool.manifest};
  out.pairs.reserve(pool.size());
  for (const auto& p : pool.pairs) {
    if (!excluded.contains(p.key())) out.pairs.push_back(p);
  }
  out.manifest.n = out.pairs.size();
  return out;
}

}  // namespace currseq

#pragma once

// Synthetic dialogue from a small clause grammar. A reply restates the
// previous utterance's clauses with swapped pronouns and paired verbs, and
// usually stays in the same length class, so every class has plenty of
// length pairs and what is learned on short clauses carries over to long
// ones. Output uses the corpus text format: one utterance per line, a blank
// line between conversations.

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "currseq/corpus.hpp"
#include "currseq/rng.hpp"

namespace currseq::synthetic {

struct GrammarConfig {
  std::size_t conversations = 1000;
  std::size_t min_turns = 2;
  std::size_t max_turns = 8;
  double stay_in_class = 0.8;  // chance a reply keeps the previous length class
  double noise = 0.1;          // chance a reply ignores its source
  double overlong = 0.02;      // chance an utterance exceeds 16 words
  std::uint64_t seed = 0;
};

namespace detail {

inline constexpr std::array<std::string_view, 6> kSubjects{"i", "you", "we", "they", "he", "she"};
inline constexpr std::array<std::string_view, 6> kSwapped{"you", "i", "they", "we", "she", "he"};
inline constexpr std::array<std::string_view, 6> kConnectors{"and", "but", "because", "so", "then", "while"};
inline constexpr std::array<std::string_view, 6> kFillers{"yes", "no", "well", "oh", "okay", "sure"};
inline constexpr std::array<std::string_view, 24> kVerbs{
    "like",  "see",  "want",  "need",   "find", "take",  "bring", "keep",  "make",  "buy",   "sell",  "hold",
    "love",  "hate", "fix",   "break",  "open", "close", "paint", "carry", "build", "clean", "cook",  "watch"};
inline constexpr std::array<std::string_view, 48> kNouns{
    "dog",    "cat",    "house",  "car",    "boat",   "tree",   "river",  "city",   "book",   "song",
    "door",   "window", "garden", "road",   "bridge", "train",  "horse",  "bird",   "apple",  "bread",
    "cake",   "coffee", "letter", "phone",  "table",  "chair",  "lamp",   "key",    "map",    "ring",
    "shirt",  "hat",    "box",    "bag",    "ticket", "picture", "guitar", "piano",  "flower", "stone",
    "island", "forest", "school", "market", "office", "kitchen", "wall",   "clock"};
inline constexpr std::array<std::string_view, 16> kAdjectives{"big",  "small", "old",  "new",   "red",   "blue",
                                                              "good", "bad",   "warm", "cold",  "quiet", "loud",
                                                              "dark", "green", "long", "short"};

struct Clause {
  std::size_t subject = 0;
  std::size_t verb = 0;
  std::size_t noun = 0;
  int adjective = -1;

  std::size_t words() const { return adjective < 0 ? 3 : 4; }

  void append_to(std::vector<std::string>& out, bool swapped) const {
    out.emplace_back(swapped ? kSwapped[subject] : kSubjects[subject]);
    // Replies answer with the paired verb: like -> see, see -> like, ...
    out.emplace_back(kVerbs[swapped ? (verb ^ 1) : verb]);
    if (adjective >= 0) out.emplace_back(kAdjectives[static_cast<std::size_t>(adjective)]);
    out.emplace_back(kNouns[noun]);
  }
};

inline Clause random_clause(KeyedRng& rng) {
  Clause c;
  c.subject = static_cast<std::size_t>(rng.below(kSubjects.size()));
  c.verb = static_cast<std::size_t>(rng.below(kVerbs.size()));
  c.noun = static_cast<std::size_t>(rng.below(kNouns.size()));
  c.adjective = rng.uniform01() < 0.5 ? static_cast<int>(rng.below(kAdjectives.size())) : -1;
  return c;
}

// An utterance keeps its clauses so a reply can restate them.
struct Turn {
  std::vector<Clause> clauses;
  std::vector<std::string> words;
};

inline std::size_t pick_length(LengthClass c, KeyedRng& rng) {
  switch (c) {
    case LengthClass::Short: return 1 + rng.below(kShortMaxWords);
    case LengthClass::Medium: return kShortMaxWords + 1 + rng.below(kMediumMaxWords - kShortMaxWords);
    case LengthClass::Long: return kMediumMaxWords + 1 + rng.below(kLongMaxWords - kMediumMaxWords);
    case LengthClass::Overlong: return kLongMaxWords + 1 + rng.below(6);
  }
  return 1;
}

// Builds an utterance of exactly `length` words. Restated clauses (when
// replying) come first, then fresh clauses; very short utterances become a
// filler, a noun or a bare clause head.
inline Turn make_turn(std::size_t length, const std::vector<Clause>& restate, KeyedRng& rng) {
  Turn t;
  if (length <= 2) {
    if (!restate.empty()) {
      const auto& c = restate.front();
      t.words.emplace_back(length == 1 ? kFillers[rng.below(kFillers.size())] : kSwapped[c.subject]);
      if (length == 2) t.words.emplace_back(kNouns[c.noun]);
    } else {
      t.words.emplace_back(kFillers[rng.below(kFillers.size())]);
      if (length == 2) t.words.emplace_back(kNouns[rng.below(kNouns.size())]);
    }
    return t;
  }
  for (const auto& c : restate) {
    if (t.words.size() + c.words() + (t.words.empty() ? 0 : 1) > length) break;
    if (!t.words.empty()) t.words.emplace_back(kConnectors[rng.below(kConnectors.size())]);
    c.append_to(t.words, true);
    t.clauses.push_back({c.subject ^ 1, c.verb ^ 1, c.noun, c.adjective});
  }
  while (t.words.size() < length) {
    const auto room = length - t.words.size() - (t.words.empty() ? 0 : 1);
    if (room < 3) {
      // Pad with a filler at the front or an adjective-free tail noun.
      if (t.words.empty() || rng.uniform01() < 0.5) {
        t.words.insert(t.words.begin(), std::string(kFillers[rng.below(kFillers.size())]));
      } else {
        t.words.emplace_back(kNouns[rng.below(kNouns.size())]);
      }
      continue;
    }
    auto c = random_clause(rng);
    if (room == 3) c.adjective = -1;
    if (room == 4 && c.adjective < 0) c.adjective = static_cast<int>(rng.below(kAdjectives.size()));
    if (!t.words.empty()) t.words.emplace_back(kConnectors[rng.below(kConnectors.size())]);
    c.append_to(t.words, false);
    t.clauses.push_back(c);
  }
  return t;
}

inline LengthClass random_class(KeyedRng& rng) { return static_cast<LengthClass>(rng.below(3)); }

}  // namespace detail

// Writes cfg.conversations conversations. Deterministic in cfg.seed.
inline void write_corpus(std::ostream& out, const GrammarConfig& cfg) {
  using namespace detail;
  for (std::size_t conv = 0; conv < cfg.conversations; ++conv) {
    KeyedRng rng(derive_key(cfg.seed, "conversation", conv));
    const auto turns = cfg.min_turns + rng.below(cfg.max_turns - cfg.min_turns + 1);
    LengthClass cls = random_class(rng);
    Turn prev;
    for (std::size_t k = 0; k < turns; ++k) {
      if (k > 0 && rng.uniform01() >= cfg.stay_in_class) cls = random_class(rng);
      const auto actual = rng.uniform01() < cfg.overlong ? LengthClass::Overlong : cls;
      const bool reply = k > 0 && rng.uniform01() >= cfg.noise;
      prev = make_turn(pick_length(actual, rng), reply ? prev.clauses : std::vector<Clause>{}, rng);
      for (std::size_t w = 0; w < prev.words.size(); ++w) {
        if (w) out << ' ';
        out << prev.words[w];
      }
      out << '\n';
    }
    out << '\n';
  }
}

}  // namespace currseq::synthetic

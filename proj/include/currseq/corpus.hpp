#pragma once

// Dialogue corpus handling: utterances, length classes, successive-utterance
// pairs and the four pools (short/medium/long length pairs plus cross pairs)
// that every training set is drawn from.

#include <array>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "currseq/errors.hpp"

namespace currseq {

enum class LengthClass : std::uint8_t { Short = 0, Medium = 1, Long = 2, Overlong = 3 };

inline constexpr std::size_t kShortMaxWords = 4;
inline constexpr std::size_t kMediumMaxWords = 10;
inline constexpr std::size_t kLongMaxWords = 16;

// Word counts exclude the start/end markers added at encode time.
constexpr LengthClass classify_word_count(std::size_t words) {
  if (words == 0) throw InvalidUtterance("utterance has no words");
  if (words <= kShortMaxWords) return LengthClass::Short;
  if (words <= kMediumMaxWords) return LengthClass::Medium;
  if (words <= kLongMaxWords) return LengthClass::Long;
  return LengthClass::Overlong;
}

inline LengthClass classify_length(std::span<const std::string> tokens) {
  return classify_word_count(tokens.size());
}

constexpr std::string_view to_string(LengthClass c) noexcept {
  switch (c) {
    case LengthClass::Short: return "short";
    case LengthClass::Medium: return "medium";
    case LengthClass::Long: return "long";
    case LengthClass::Overlong: return "overlong";
  }
  return "?";
}

inline std::optional<LengthClass> parse_length_class(std::string_view s) {
  for (auto c : {LengthClass::Short, LengthClass::Medium, LengthClass::Long, LengthClass::Overlong}) {
    if (s == to_string(c)) return c;
  }
  return std::nullopt;
}

namespace detail {

constexpr bool is_space(char c) noexcept {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

constexpr char ascii_lower(char c) noexcept {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

// Returns the byte offset of the first invalid UTF-8 sequence, or npos.
inline std::size_t find_invalid_utf8(std::string_view s) noexcept {
  std::size_t i = 0;
  const auto byte = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  while (i < s.size()) {
    const unsigned char c = byte(i);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return i;
    }
    if (i + len > s.size()) return i;
    for (std::size_t k = 1; k < len; ++k) {
      if ((byte(i + k) & 0xC0) != 0x80) return i;
      cp = (cp << 6) | (byte(i + k) & 0x3F);
    }
    // Overlong encodings, surrogates and out-of-range code points.
    static constexpr std::uint32_t kMin[5] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return i;
    i += len;
  }
  return std::string_view::npos;
}

}  // namespace detail

// Lowercased, whitespace-delimited words of one line of dialogue.
struct Utterance {
  std::vector<std::string> tokens;

  // Lowercases ASCII letters and splits on ASCII whitespace. Throws
  // InvalidUtterance when the line holds no words.
  static Utterance from_line(std::string_view line) {
    Utterance u;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && detail::is_space(line[i])) ++i;
      const std::size_t start = i;
      while (i < line.size() && !detail::is_space(line[i])) ++i;
      if (i > start) {
        std::string word(line.substr(start, i - start));
        for (char& ch : word) ch = detail::ascii_lower(ch);
        u.tokens.push_back(std::move(word));
      }
    }
    if (u.tokens.empty()) throw InvalidUtterance("line has no words");
    return u;
  }

  std::size_t size() const noexcept { return tokens.size(); }

  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out.push_back(' ');
      out += tokens[i];
    }
    return out;
  }

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

using Conversation = std::vector<Utterance>;

struct DialoguePair {
  Utterance source;
  Utterance target;
  LengthClass source_class = LengthClass::Short;
  LengthClass target_class = LengthClass::Short;

  static DialoguePair of(Utterance source, Utterance target) {
    DialoguePair p;
    p.source_class = classify_length(source.tokens);
    p.target_class = classify_length(target.tokens);
    p.source = std::move(source);
    p.target = std::move(target);
    return p;
  }

  // A length pair has both sentences in the same class.
  bool is_length_pair() const noexcept { return source_class == target_class; }
  bool within_cross_limit() const noexcept {
    return source.size() <= kLongMaxWords && target.size() <= kLongMaxWords;
  }

  // Identity used to keep held-out and training pairs disjoint.
  std::string key() const { return source.text() + '\t' + target.text(); }

  friend bool operator==(const DialoguePair&, const DialoguePair&) = default;
};

// Streams conversations from plain text: one utterance per line, a blank
// line ends a conversation, end of input ends the last one.
class ConversationReader {
 public:
  explicit ConversationReader(std::istream& in) : in_(in) {}

  std::optional<Conversation> next() {
    Conversation conv;
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (const auto bad = detail::find_invalid_utf8(line); bad != std::string::npos) {
        throw CorpusDecodeError(line_no_, "invalid UTF-8 at byte " + std::to_string(bad));
      }
      const bool blank = line.find_first_not_of(" \t\r\f\v") == std::string::npos;
      if (blank) {
        if (!conv.empty()) return conv;
        continue;
      }
      conv.push_back(Utterance::from_line(line));
    }
    if (!conv.empty()) return conv;
    return std::nullopt;
  }

  std::size_t lines_read() const noexcept { return line_no_; }

 private:
  std::istream& in_;
  std::size_t line_no_ = 0;
};

inline std::vector<Conversation> parse_conversations(std::istream& in) {
  std::vector<Conversation> out;
  ConversationReader reader(in);
  while (auto conv = reader.next()) out.push_back(std::move(*conv));
  return out;
}

// (u1,u2), (u2,u3), ... within one conversation. No speaker filtering.
inline std::vector<DialoguePair> extract_pairs(std::span<const Utterance> conversation) {
  std::vector<DialoguePair> pairs;
  if (conversation.size() < 2) return pairs;
  pairs.reserve(conversation.size() - 1);
  for (std::size_t i = 0; i + 1 < conversation.size(); ++i) {
    pairs.push_back(DialoguePair::of(conversation[i], conversation[i + 1]));
  }
  return pairs;
}

enum class PoolLabel : std::uint8_t { Short = 0, Medium = 1, Long = 2, Mix = 3, Cross = 4 };

constexpr std::string_view to_string(PoolLabel l) noexcept {
  switch (l) {
    case PoolLabel::Short: return "short";
    case PoolLabel::Medium: return "medium";
    case PoolLabel::Long: return "long";
    case PoolLabel::Mix: return "mix";
    case PoolLabel::Cross: return "cross";
  }
  return "?";
}

inline std::optional<PoolLabel> parse_pool_label(std::string_view s) {
  for (auto l : {PoolLabel::Short, PoolLabel::Medium, PoolLabel::Long, PoolLabel::Mix, PoolLabel::Cross}) {
    if (s == to_string(l)) return l;
  }
  return std::nullopt;
}

constexpr PoolLabel pool_label_of(LengthClass c) {
  switch (c) {
    case LengthClass::Short: return PoolLabel::Short;
    case LengthClass::Medium: return PoolLabel::Medium;
    case LengthClass::Long: return PoolLabel::Long;
    case LengthClass::Overlong: break;
  }
  throw InvalidUtterance("overlong sentences have no pool");
}

enum class Disposition : std::uint8_t { ShortPool, MediumPool, LongPool, CrossOnly, Discarded };

struct DispositionCounts {
  std::uint64_t short_pairs = 0;
  std::uint64_t medium_pairs = 0;
  std::uint64_t long_pairs = 0;
  std::uint64_t cross_only = 0;
  std::uint64_t discarded = 0;

  std::uint64_t total() const noexcept {
    return short_pairs + medium_pairs + long_pairs + cross_only + discarded;
  }
  // Every non-discarded pair is cross-eligible.
  std::uint64_t cross_total() const noexcept {
    return short_pairs + medium_pairs + long_pairs + cross_only;
  }

  friend bool operator==(const DispositionCounts&, const DispositionCounts&) = default;
};

// Provenance recorded next to every pool file.
struct PoolManifest {
  std::string corpus;         // path or identifier of the source text
  std::string corpus_digest;  // sha256 of the source text, if known
  std::uint64_t n = 0;        // pairs in this pool
  std::uint64_t seed = 0;     // sampling seed (0 for full pools)
  std::string extraction = "lowercase ascii; whitespace tokens; successive utterances; blank line ends conversation";
  DispositionCounts counts;   // dispositions of the parent corpus
};

struct PairPool {
  PoolLabel label = PoolLabel::Cross;
  std::vector<DialoguePair> pairs;
  PoolManifest manifest;

  std::size_t size() const noexcept { return pairs.size(); }
  bool empty() const noexcept { return pairs.empty(); }
};

// Checks the label-specific membership rule for every pair; throws
// FormatError naming the first violation. Mix balance is checked separately.
inline void check_pool_membership(const PairPool& pool) {
  for (std::size_t i = 0; i < pool.pairs.size(); ++i) {
    const auto& p = pool.pairs[i];
    bool ok = true;
    switch (pool.label) {
      case PoolLabel::Short:
      case PoolLabel::Medium:
      case PoolLabel::Long:
        ok = p.is_length_pair() && pool_label_of(p.source_class) == pool.label;
        break;
      case PoolLabel::Mix:
        ok = p.is_length_pair() && p.source_class != LengthClass::Overlong;
        break;
      case PoolLabel::Cross:
        ok = p.within_cross_limit();
        break;
    }
    if (!ok) {
      throw FormatError("pair " + std::to_string(i) + " violates the " + std::string(to_string(pool.label)) +
                        " pool rule");
    }
  }
}

struct CorpusPools {
  std::array<PairPool, 3> length{PairPool{PoolLabel::Short, {}, {}}, PairPool{PoolLabel::Medium, {}, {}},
                                 PairPool{PoolLabel::Long, {}, {}}};
  PairPool cross{PoolLabel::Cross, {}, {}};
  DispositionCounts counts;

  PairPool& of(LengthClass c) { return length.at(static_cast<std::size_t>(pool_label_of(c))); }
  const PairPool& of(LengthClass c) const { return length.at(static_cast<std::size_t>(pool_label_of(c))); }
};

// Routes pairs: length pairs to their class pool, and everything within the
// 16-word limit to the cross pool. Pairs with any overlong sentence are
// dropped.
class PoolBuilder {
 public:
  Disposition add(const DialoguePair& pair) {
    if (!pair.within_cross_limit()) {
      ++pools_.counts.discarded;
      return Disposition::Discarded;
    }
    pools_.cross.pairs.push_back(pair);
    if (!pair.is_length_pair()) {
      ++pools_.counts.cross_only;
      return Disposition::CrossOnly;
    }
    pools_.of(pair.source_class).pairs.push_back(pair);
    switch (pair.source_class) {
      case LengthClass::Short: ++pools_.counts.short_pairs; return Disposition::ShortPool;
      case LengthClass::Medium: ++pools_.counts.medium_pairs; return Disposition::MediumPool;
      default: ++pools_.counts.long_pairs; return Disposition::LongPool;
    }
  }

  void add_conversation(std::span<const Utterance> conversation) {
    for (const auto& p : extract_pairs(conversation)) add(p);
  }

  const DispositionCounts& counts() const noexcept { return pools_.counts; }

  CorpusPools finish(std::string corpus_id = {}, std::string corpus_digest = {}) && {
    auto stamp = [&](PairPool& p) {
      p.manifest.corpus = corpus_id;
      p.manifest.corpus_digest = corpus_digest;
      p.manifest.n = p.pairs.size();
      p.manifest.counts = pools_.counts;
    };
    for (auto& p : pools_.length) stamp(p);
    stamp(pools_.cross);
    return std::move(pools_);
  }

 private:
  CorpusPools pools_;
};

inline CorpusPools build_pools(std::span<const DialoguePair> pairs) {
  PoolBuilder b;
  for (const auto& p : pairs) b.add(p);
  return std::move(b).finish();
}

// Single pass over a corpus stream.
inline CorpusPools build_pools(std::istream& corpus, std::string corpus_id = {}, std::string corpus_digest = {}) {
  PoolBuilder b;
  ConversationReader reader(corpus);
  while (auto conv = reader.next()) b.add_conversation(*conv);
  return std::move(b).finish(std::move(corpus_id), std::move(corpus_digest));
}

}  // namespace currseq

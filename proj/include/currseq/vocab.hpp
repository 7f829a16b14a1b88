#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "currseq/corpus.hpp"
#include "currseq/digest.hpp"
#include "currseq/errors.hpp"

namespace currseq {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kSos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kReservedTokens = 4;

// Immutable word <-> id map. Ids 0..3 are PAD, SOS, EOS and UNK; corpus
// words follow in descending frequency, ties broken lexicographically.
class Vocabulary {
 public:
  Vocabulary() : id_to_token_{"<pad>", "<sos>", "<eos>", "<unk>"}, freq_(kReservedTokens, 0) {}

  std::size_t size() const noexcept { return id_to_token_.size(); }

  TokenId lookup(std::string_view word) const {
    const auto it = token_to_id_.find(std::string(word));
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view word) const { return token_to_id_.contains(std::string(word)); }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) throw UnknownId(id);
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::uint64_t frequency(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) throw UnknownId(id);
    return freq_[static_cast<std::size_t>(id)];
  }

  // Body lines `id<TAB>token<TAB>frequency`, reserved entries included.
  std::string body() const {
    std::string out;
    for (std::size_t i = 0; i < size(); ++i) {
      out += std::to_string(i) + '\t' + id_to_token_[i] + '\t' + std::to_string(freq_[i]) + '\n';
    }
    return out;
  }

  std::string digest() const { return sha256_hex(body()); }

  // Appends a corpus word; ids are assigned densely in call order.
  void append(std::string word, std::uint64_t freq) {
    if (token_to_id_.contains(word)) throw FormatError("duplicate vocabulary entry '" + word + "'");
    token_to_id_.emplace(word, static_cast<TokenId>(id_to_token_.size()));
    id_to_token_.push_back(std::move(word));
    freq_.push_back(freq);
  }

 private:
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::vector<std::uint64_t> freq_;
};

class VocabCounter {
 public:
  void add(const Utterance& u) {
    for (const auto& w : u.tokens) ++counts_[w];
  }
  void add(const DialoguePair& p) {
    add(p.source);
    add(p.target);
  }
  void add(std::span<const DialoguePair> pairs) {
    for (const auto& p : pairs) add(p);
  }

  // max_size counts the four reserved entries.
  Vocabulary finish(std::size_t max_size, std::uint64_t min_freq = 1) const {
    if (max_size < kReservedTokens) throw ConfigError("max_size", "must be at least 4");
    std::vector<std::pair<std::string, std::uint64_t>> entries;
    entries.reserve(counts_.size());
    for (const auto& [w, n] : counts_) {
      if (n >= min_freq) entries.emplace_back(w, n);
    }
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    Vocabulary v;
    for (auto& [w, n] : entries) {
      if (v.size() >= max_size) break;
      v.append(std::move(w), n);
    }
    return v;
  }

 private:
  std::unordered_map<std::string, std::uint64_t> counts_;
};

inline Vocabulary build_vocab(std::span<const DialoguePair> pairs, std::size_t max_size = 4000,
                              std::uint64_t min_freq = 1) {
  VocabCounter c;
  c.add(pairs);
  return c.finish(max_size, min_freq);
}

// Source ids carry no markers. `reverse` feeds the encoder back to front.
inline std::vector<TokenId> encode_source(const Utterance& u, const Vocabulary& v, bool reverse = false) {
  std::vector<TokenId> ids;
  ids.reserve(u.size());
  for (const auto& w : u.tokens) ids.push_back(v.lookup(w));
  if (reverse) std::reverse(ids.begin(), ids.end());
  return ids;
}

// [SOS] + words + [EOS].
inline std::vector<TokenId> encode_target(const Utterance& u, const Vocabulary& v) {
  std::vector<TokenId> ids;
  ids.reserve(u.size() + 2);
  ids.push_back(kSos);
  for (const auto& w : u.tokens) ids.push_back(v.lookup(w));
  ids.push_back(kEos);
  return ids;
}

inline std::vector<std::string> decode(std::span<const TokenId> ids, const Vocabulary& v) {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (auto id : ids) words.push_back(v.token(id));
  return words;
}

inline constexpr std::string_view kVocabMagic = "# currseq-vocab v1 sha256=";

inline void write_vocab(const std::filesystem::path& path, const Vocabulary& v) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const auto body = v.body();
  out << kVocabMagic << sha256_hex(body) << '\n' << body;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Vocabulary read_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocabulary '" + path.string() + "'");
  std::string header;
  std::getline(in, header);
  if (!header.starts_with(kVocabMagic)) throw FormatError("'" + path.string() + "' is not a vocabulary file");
  const std::string expected = header.substr(kVocabMagic.size());
  Vocabulary v;
  std::string body, line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    body += line + '\n';
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos) throw FormatError("malformed vocabulary line");
    if (std::stoull(line.substr(0, t1)) != row) throw FormatError("vocabulary ids must be dense and ordered");
    if (row >= kReservedTokens) v.append(line.substr(t1 + 1, t2 - t1 - 1), std::stoull(line.substr(t2 + 1)));
    ++row;
  }
  if (row < kReservedTokens) throw FormatError("vocabulary lacks reserved entries");
  if (sha256_hex(body) != expected) throw FormatError("vocabulary digest mismatch in '" + path.string() + "'");
  return v;
}

}  // namespace currseq

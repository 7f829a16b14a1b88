#pragma once

// Pool files: one pair per line as `source<TAB>target`, with a JSON sidecar
// manifest at `<path>.manifest.json`.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "currseq/corpus.hpp"
#include "currseq/digest.hpp"
#include "currseq/errors.hpp"

namespace currseq {

inline nlohmann::json to_json(const DispositionCounts& c) {
  return {{"short", c.short_pairs},     {"medium", c.medium_pairs}, {"long", c.long_pairs},
          {"cross_only", c.cross_only}, {"discarded", c.discarded}, {"total", c.total()}};
}

inline DispositionCounts disposition_counts_from_json(const nlohmann::json& j) {
  DispositionCounts c;
  c.short_pairs = j.at("short").get<std::uint64_t>();
  c.medium_pairs = j.at("medium").get<std::uint64_t>();
  c.long_pairs = j.at("long").get<std::uint64_t>();
  c.cross_only = j.at("cross_only").get<std::uint64_t>();
  c.discarded = j.at("discarded").get<std::uint64_t>();
  return c;
}

inline std::string manifest_path(const std::filesystem::path& pool_path) {
  return pool_path.string() + ".manifest.json";
}

inline std::string pool_body(const PairPool& pool) {
  std::string out;
  for (const auto& p : pool.pairs) {
    out += p.source.text();
    out += '\t';
    out += p.target.text();
    out += '\n';
  }
  return out;
}

inline nlohmann::json pool_manifest_json(const PairPool& pool, const std::string& body_digest) {
  const auto& m = pool.manifest;
  return {{"corpus", m.corpus},
          {"corpus_digest", m.corpus_digest},
          {"class", std::string(to_string(pool.label))},
          {"n", pool.size()},
          {"seed", m.seed},
          {"extraction", m.extraction},
          {"dispositions", to_json(m.counts)},
          {"content_digest", body_digest}};
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_pool(const std::filesystem::path& path, const PairPool& pool) {
  const auto body = pool_body(pool);
  write_text_file(path, body);
  write_text_file(manifest_path(path), pool_manifest_json(pool, sha256_hex(body)).dump(2) + "\n");
}

// Reads a pool file, re-deriving length classes. The label comes from the
// manifest when present, otherwise from `fallback`. Membership is verified.
inline PairPool read_pool(const std::filesystem::path& path, PoolLabel fallback = PoolLabel::Cross) {
  if (!std::filesystem::exists(path)) throw IoError("pool file '" + path.string() + "' does not exist");
  PairPool pool{fallback, {}, {}};
  const auto mpath = manifest_path(path);
  if (std::filesystem::exists(mpath)) {
    const auto j = nlohmann::json::parse(read_text_file(mpath));
    if (auto l = parse_pool_label(j.at("class").get<std::string>())) pool.label = *l;
    pool.manifest.corpus = j.value("corpus", "");
    pool.manifest.corpus_digest = j.value("corpus_digest", "");
    pool.manifest.seed = j.value("seed", std::uint64_t{0});
    pool.manifest.extraction = j.value("extraction", pool.manifest.extraction);
    if (j.contains("dispositions")) pool.manifest.counts = disposition_counts_from_json(j.at("dispositions"));
  }
  std::ifstream in(path, std::ios::binary);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected exactly one tab");
    }
    try {
      pool.pairs.push_back(DialoguePair::of(Utterance::from_line(std::string_view(line).substr(0, tab)),
                                            Utterance::from_line(std::string_view(line).substr(tab + 1))));
    } catch (const InvalidUtterance& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  pool.manifest.n = pool.pairs.size();
  check_pool_membership(pool);
  return pool;
}

}  // namespace currseq

#pragma once

// Checkpoint files.
//
//   bytes 0..3   "CLSC"
//   u32 LE       format version
//   u64 LE       header length N
//   N bytes      JSON header (model config, lineage, val_loss, digests,
//                array shapes); keys sorted, so the encoding is canonical
//   arrays       every parameter array in slot order, row-major, f32 LE
//
// Parsing then re-serialising a file reproduces it byte for byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "currseq/errors.hpp"
#include "currseq/model.hpp"

namespace currseq {

inline constexpr std::string_view kCheckpointMagic = "CLSC";
inline constexpr std::uint32_t kCheckpointVersion = 1;

// One stage of a parameter set's history.
struct StageRecord {
  std::string segment;  // short | medium | long | mix | cross | fresh-long ...
  std::uint64_t set_size = 0;
  int epochs = 0;
  std::uint64_t seed_index = 0;
  std::uint64_t seed = 0;  // init or shuffle key of the run

  std::string key() const {
    return segment + "-" + std::to_string(set_size) + "-e" + std::to_string(epochs) + "-s" +
           std::to_string(seed_index);
  }

  friend bool operator==(const StageRecord&, const StageRecord&) = default;
};

using Lineage = std::vector<StageRecord>;

// "short-2000-e2-s0/medium-10000-e4-s0/..."
inline std::string lineage_key(const Lineage& lineage) {
  std::string out;
  for (std::size_t i = 0; i < lineage.size(); ++i) {
    if (i) out += '/';
    out += lineage[i].key();
  }
  return out;
}

inline nlohmann::json to_json(const StageRecord& s) {
  return {{"segment", s.segment}, {"set_size", s.set_size}, {"epochs", s.epochs},
          {"seed_index", s.seed_index}, {"seed", s.seed}};
}

inline StageRecord stage_from_json(const nlohmann::json& j) {
  return {j.at("segment").get<std::string>(), j.at("set_size").get<std::uint64_t>(), j.at("epochs").get<int>(),
          j.at("seed_index").get<std::uint64_t>(), j.at("seed").get<std::uint64_t>()};
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim}, {"hidden_dim", c.hidden_dim},
          {"init_scale", c.init_scale}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.init_scale = j.value("init_scale", 0.08);
  c.seed = j.value("seed", std::uint64_t{0});
  return c;
}

struct Checkpoint {
  ModelConfig model;
  Parameters<float> params;
  Lineage lineage;
  double val_loss = 0.0;
  std::string config_digest;   // digest of the model + trainer configuration
  std::string metrics_digest;  // digest of the per-epoch metric lines up to this mark

  std::string key() const { return lineage_key(lineage); }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_le(std::string_view in, std::size_t offset, int bytes) {
  if (offset + static_cast<std::size_t>(bytes) > in.size()) throw FormatError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + static_cast<std::size_t>(i)])) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline nlohmann::json checkpoint_header(const Checkpoint& c) {
  nlohmann::json lineage = nlohmann::json::array();
  for (const auto& s : c.lineage) lineage.push_back(to_json(s));
  nlohmann::json arrays = nlohmann::json::array();
  for (std::size_t s = 0; s < kNumSlots; ++s) {
    arrays.push_back({{"name", std::string(kSlotNames[s])},
                      {"rows", c.params.arrays[s].rows()},
                      {"cols", c.params.arrays[s].cols()}});
  }
  return {{"format", "currseq-checkpoint"},
          {"model", to_json(c.model)},
          {"lineage", lineage},
          {"lineage_key", c.key()},
          {"val_loss", c.val_loss},
          {"config_digest", c.config_digest},
          {"metrics_digest", c.metrics_digest},
          {"arrays", arrays}};
}

inline std::string serialize_checkpoint(const Checkpoint& c) {
  if (!c.params.matches(c.model)) throw FormatError("checkpoint parameters do not match their model config");
  const std::string header = checkpoint_header(c).dump();
  std::string out;
  out.reserve(16 + header.size() + 4 * c.params.count());
  out.append(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, header.size());
  out += header;
  for (const auto& a : c.params.arrays) {
    for (Eigen::Index k = 0; k < a.size(); ++k) detail::put_u32(out, std::bit_cast<std::uint32_t>(a.data()[k]));
  }
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 4) != kCheckpointMagic) throw FormatError("not a checkpoint file");
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = detail::get_le(bytes, 8, 8);
  if (16 + header_len > bytes.size()) throw FormatError("checkpoint header truncated");
  const auto header = nlohmann::json::parse(bytes.substr(16, header_len));

  Checkpoint c;
  c.model = model_config_from_json(header.at("model"));
  for (const auto& s : header.at("lineage")) c.lineage.push_back(stage_from_json(s));
  c.val_loss = header.at("val_loss").get<double>();
  c.config_digest = header.at("config_digest").get<std::string>();
  c.metrics_digest = header.at("metrics_digest").get<std::string>();
  c.params = Parameters<float>::zeros(c.model);

  const auto& arrays = header.at("arrays");
  if (arrays.size() != kNumSlots) throw FormatError("checkpoint array count mismatch");
  std::size_t offset = 16 + header_len;
  for (std::size_t s = 0; s < kNumSlots; ++s) {
    auto& a = c.params.arrays[s];
    if (arrays[s].at("name").get<std::string>() != kSlotNames[s] || arrays[s].at("rows").get<Eigen::Index>() != a.rows() ||
        arrays[s].at("cols").get<Eigen::Index>() != a.cols()) {
      throw FormatError("checkpoint array '" + std::string(kSlotNames[s]) + "' has unexpected shape");
    }
    for (Eigen::Index k = 0; k < a.size(); ++k) {
      a.data()[k] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(bytes, offset, 4)));
      offset += 4;
    }
  }
  if (offset != bytes.size()) throw FormatError("trailing bytes after checkpoint arrays");
  return c;
}

// Writes via a temporary file and rename, so readers never see a partial
// checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    const auto bytes = serialize_checkpoint(c);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

// File name for a lineage key: '/' separators become '__'.
inline std::string checkpoint_file_name(const std::string& key) {
  std::string out;
  for (char ch : key) {
    if (ch == '/') {
      out += "__";
    } else {
      out.push_back(ch);
    }
  }
  return out + ".clsc";
}

}  // namespace currseq

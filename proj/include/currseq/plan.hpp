#pragma once

// Curriculum plans: the ordered segments of a run, the baselines to compare
// against, and the model/trainer settings shared by every cell. Plans are
// JSON documents; parse errors name the offending key.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "currseq/corpus.hpp"
#include "currseq/digest.hpp"
#include "currseq/errors.hpp"
#include "currseq/model.hpp"
#include "currseq/trainer.hpp"

namespace currseq {

struct SegmentSpec {
  LengthClass length_class = LengthClass::Short;
  std::vector<std::size_t> set_sizes;
  std::size_t seeds_per_cell = 1;
  std::vector<int> epoch_checkpoints{2, 4, 6};
  std::size_t val_size = 1000;

  void validate(const std::string& where) const {
    if (length_class == LengthClass::Overlong) throw ConfigError(where + ".class", "overlong is not a segment class");
    if (set_sizes.empty()) throw ConfigError(where + ".sizes", "must not be empty");
    for (std::size_t i = 1; i < set_sizes.size(); ++i) {
      if (set_sizes[i] <= set_sizes[i - 1]) throw ConfigError(where + ".sizes", "must be ascending and distinct");
    }
    if (set_sizes.front() == 0) throw ConfigError(where + ".sizes", "must be positive");
    if (seeds_per_cell < 1) throw ConfigError(where + ".seeds", "must be at least 1");
    if (epoch_checkpoints.empty()) throw ConfigError(where + ".checkpoints", "must not be empty");
    for (std::size_t i = 0; i < epoch_checkpoints.size(); ++i) {
      if (epoch_checkpoints[i] < 1 || (i && epoch_checkpoints[i] <= epoch_checkpoints[i - 1])) {
        throw ConfigError(where + ".checkpoints", "must be positive and strictly ascending");
      }
    }
    if (val_size < 1) throw ConfigError(where + ".val_size", "must be positive");
  }
};

enum class BaselineKind : std::uint8_t { Fresh, Mix, Cross };

constexpr std::string_view to_string(BaselineKind k) noexcept {
  switch (k) {
    case BaselineKind::Fresh: return "fresh";
    case BaselineKind::Mix: return "mix";
    case BaselineKind::Cross: return "cross";
  }
  return "?";
}

struct BaselineSpec {
  BaselineKind kind = BaselineKind::Fresh;
  std::vector<std::size_t> set_sizes;
  std::size_t replicas = 5;
  std::vector<int> epoch_checkpoints{6};
};

struct CurriculumPlan {
  std::vector<SegmentSpec> segments;
  std::vector<BaselineSpec> baselines;
  double carry_fraction = 1.0;
  std::uint64_t master_seed = 0;
  ModelConfig model;  // vocab_size is taken from the data's vocabulary
  TrainConfig trainer;
  std::string data;   // directory holding prepared pools and vocabulary
  std::size_t workers = 1;

  const SegmentSpec& final_segment() const { return segments.back(); }

  void validate() const {
    if (segments.empty()) throw ConfigError("segments", "at least one segment is required");
    for (std::size_t i = 0; i < segments.size(); ++i) segments[i].validate("segments[" + std::to_string(i) + "]");
    if (!(carry_fraction > 0.0 && carry_fraction <= 1.0)) throw ConfigError("carry_fraction", "must lie in (0, 1]");
    for (std::size_t i = 0; i < baselines.size(); ++i) {
      const auto where = "baselines[" + std::to_string(i) + "]";
      if (baselines[i].set_sizes.empty()) throw ConfigError(where + ".sizes", "must not be empty");
      if (baselines[i].replicas < 1) throw ConfigError(where + ".replicas", "must be at least 1");
      if (baselines[i].epoch_checkpoints.empty()) throw ConfigError(where + ".checkpoints", "must not be empty");
    }
    if (workers < 1) throw ConfigError("workers", "must be at least 1");
    model.validate();
    trainer.validate();
  }
};

namespace detail {

template <typename T>
T plan_get(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + key, "missing");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + key, e.what());
  }
}

template <typename T>
T plan_get_or(const nlohmann::json& j, const std::string& key, const std::string& where, T fallback) {
  return j.contains(key) ? plan_get<T>(j, key, where) : fallback;
}

// Accepts a number or an exact "a/b" string.
inline double parse_fraction(const nlohmann::json& j, const std::string& key) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    const auto slash = s.find('/');
    try {
      if (slash == std::string::npos) return std::stod(s);
      return std::stod(s.substr(0, slash)) / std::stod(s.substr(slash + 1));
    } catch (const std::exception&) {
    }
  }
  throw ConfigError(key, "expected a number or an 'a/b' fraction");
}

}  // namespace detail

inline const std::vector<std::string>& known_plan_keys() {
  static const std::vector<std::string> keys{"data",     "master_seed", "carry_fraction", "model", "trainer",
                                             "segments", "baselines",   "workers",        "name"};
  return keys;
}

inline CurriculumPlan plan_from_json(const nlohmann::json& j) {
  using detail::plan_get;
  using detail::plan_get_or;
  if (!j.is_object()) throw ConfigError("<root>", "plan must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    const auto& keys = known_plan_keys();
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError(k, "unknown plan key");
  }
  CurriculumPlan plan;
  plan.data = plan_get_or<std::string>(j, "data", "", "");
  plan.master_seed = plan_get<std::uint64_t>(j, "master_seed", "");
  plan.carry_fraction = j.contains("carry_fraction") ? detail::parse_fraction(j.at("carry_fraction"), "carry_fraction") : 1.0;
  plan.workers = plan_get_or<std::size_t>(j, "workers", "", 1);

  if (j.contains("model")) {
    const auto& m = j.at("model");
    plan.model.embed_dim = plan_get_or<std::size_t>(m, "embed_dim", "model.", plan.model.embed_dim);
    plan.model.hidden_dim = plan_get_or<std::size_t>(m, "hidden_dim", "model.", plan.model.hidden_dim);
    plan.model.init_scale = plan_get_or<double>(m, "init_scale", "model.", plan.model.init_scale);
    plan.model.vocab_size = plan_get_or<std::size_t>(m, "vocab_size", "model.", plan.model.vocab_size);
  }
  if (j.contains("trainer")) {
    const auto& t = j.at("trainer");
    auto& c = plan.trainer;
    c.batch_size = plan_get_or<std::size_t>(t, "batch_size", "trainer.", c.batch_size);
    c.bucket_window = plan_get_or<std::size_t>(t, "bucket_window", "trainer.", c.bucket_window);
    c.early_stop = plan_get_or<bool>(t, "early_stop", "trainer.", c.early_stop);
    c.adam.lr = plan_get_or<double>(t, "learning_rate", "trainer.", c.adam.lr);
    c.adam.beta1 = plan_get_or<double>(t, "beta1", "trainer.", c.adam.beta1);
    c.adam.beta2 = plan_get_or<double>(t, "beta2", "trainer.", c.adam.beta2);
    c.adam.eps = plan_get_or<double>(t, "eps", "trainer.", c.adam.eps);
    c.clip_norm = plan_get_or<double>(t, "clip_norm", "trainer.", c.clip_norm);
    c.reverse_source = plan_get_or<bool>(t, "reverse_source", "trainer.", c.reverse_source);
    c.eval_batch_size = plan_get_or<std::size_t>(t, "eval_batch_size", "trainer.", c.eval_batch_size);
  }
  if (!j.contains("segments") || !j.at("segments").is_array()) throw ConfigError("segments", "missing or not a list");
  for (std::size_t i = 0; i < j.at("segments").size(); ++i) {
    const auto& s = j.at("segments")[i];
    const auto where = "segments[" + std::to_string(i) + "].";
    SegmentSpec spec;
    const auto cls = parse_length_class(plan_get<std::string>(s, "class", where));
    if (!cls) throw ConfigError(where + "class", "expected short, medium or long");
    spec.length_class = *cls;
    spec.set_sizes = plan_get<std::vector<std::size_t>>(s, "sizes", where);
    spec.seeds_per_cell = plan_get_or<std::size_t>(s, "seeds", where, i == 0 ? 10 : 1);
    spec.epoch_checkpoints = plan_get_or<std::vector<int>>(s, "checkpoints", where, {2, 4, 6});
    spec.val_size = plan_get_or<std::size_t>(s, "val_size", where, 1000);
    plan.segments.push_back(std::move(spec));
  }
  if (j.contains("baselines")) {
    for (std::size_t i = 0; i < j.at("baselines").size(); ++i) {
      const auto& b = j.at("baselines")[i];
      const auto where = "baselines[" + std::to_string(i) + "].";
      BaselineSpec spec;
      const auto kind = plan_get<std::string>(b, "kind", where);
      if (kind == "fresh") {
        spec.kind = BaselineKind::Fresh;
      } else if (kind == "mix") {
        spec.kind = BaselineKind::Mix;
      } else if (kind == "cross") {
        spec.kind = BaselineKind::Cross;
      } else {
        throw ConfigError(where + "kind", "expected fresh, mix or cross");
      }
      spec.set_sizes = plan_get<std::vector<std::size_t>>(b, "sizes", where);
      spec.replicas = plan_get_or<std::size_t>(b, "replicas", where, 5);
      spec.epoch_checkpoints = plan_get_or<std::vector<int>>(
          b, "checkpoints", where, {plan.segments.empty() ? 6 : plan.segments.back().epoch_checkpoints.back()});
      plan.baselines.push_back(std::move(spec));
    }
  }
  plan.validate();
  return plan;
}

inline nlohmann::json to_json(const CurriculumPlan& plan) {
  nlohmann::json segments = nlohmann::json::array();
  for (const auto& s : plan.segments) {
    segments.push_back({{"class", std::string(to_string(s.length_class))},
                        {"sizes", s.set_sizes},
                        {"seeds", s.seeds_per_cell},
                        {"checkpoints", s.epoch_checkpoints},
                        {"val_size", s.val_size}});
  }
  nlohmann::json baselines = nlohmann::json::array();
  for (const auto& b : plan.baselines) {
    baselines.push_back({{"kind", std::string(to_string(b.kind))},
                         {"sizes", b.set_sizes},
                         {"replicas", b.replicas},
                         {"checkpoints", b.epoch_checkpoints}});
  }
  auto trainer = to_json(plan.trainer);
  trainer.erase("epoch_checkpoints");
  trainer.erase("shuffle_seed");
  return {{"data", plan.data},
          {"master_seed", plan.master_seed},
          {"carry_fraction", plan.carry_fraction},
          {"model",
           {{"embed_dim", plan.model.embed_dim},
            {"hidden_dim", plan.model.hidden_dim},
            {"init_scale", plan.model.init_scale},
            {"vocab_size", plan.model.vocab_size}}},
          {"trainer", trainer},
          {"segments", segments},
          {"baselines", baselines},
          {"workers", plan.workers}};
}

// Digest of everything that affects results (worker count and data path
// excluded).
inline std::string plan_digest(const CurriculumPlan& plan) {
  auto j = to_json(plan);
  j.erase("workers");
  j.erase("data");
  return sha256_hex(j.dump());
}

inline CurriculumPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plan '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<root>", std::string("plan is not valid JSON: ") + e.what());
  }
  auto plan = plan_from_json(j);
  if (!plan.data.empty() && std::filesystem::path(plan.data).is_relative()) {
    plan.data = (path.parent_path() / plan.data).lexically_normal().string();
  }
  return plan;
}

// Number of parameter sets a seg-grid yields: parents x sizes x seeds x marks.
inline std::size_t grid_parameter_sets(std::size_t parents, const SegmentSpec& s) {
  return std::max<std::size_t>(parents, 1) * s.set_sizes.size() * s.seeds_per_cell * s.epoch_checkpoints.size();
}

inline std::size_t grid_models(std::size_t parents, const SegmentSpec& s) {
  return std::max<std::size_t>(parents, 1) * s.set_sizes.size() * s.seeds_per_cell;
}

// ceil(fraction * n), treating products within 1e-9 of an integer as exact so
// that 1/6 of 324 is 54.
inline std::size_t carried_count(double fraction, std::size_t n) {
  const double x = fraction * static_cast<double>(n);
  const double r = std::round(x);
  if (std::abs(x - r) <= 1e-9 * std::max(1.0, x)) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::ceil(x));
}

}  // namespace currseq

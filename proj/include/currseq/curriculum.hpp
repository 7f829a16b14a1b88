#pragma once

// Segmented grid search. Each segment trains every (parent, size, seed) cell,
// the first segment's winners seed the next, the last intermediate segment's
// checkpoints are subsampled before the final segment, and baselines train
// fresh models for comparison. Every finished run is appended to
// <out>/lineage.jsonl; a rerun skips runs already recorded there.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "currseq/checkpoint.hpp"
#include "currseq/corpus.hpp"
#include "currseq/errors.hpp"
#include "currseq/plan.hpp"
#include "currseq/pool_io.hpp"
#include "currseq/rng.hpp"
#include "currseq/sampling.hpp"
#include "currseq/trainer.hpp"
#include "currseq/vocab.hpp"

namespace currseq {

// A checkpoint as seen by the lineage store. `file` is relative to the
// experiment directory.
struct CheckpointRef {
  std::string key;
  Lineage lineage;
  double val_loss = 0.0;
  std::string file;

  const StageRecord& last() const { return lineage.back(); }
};

// One finished training run: a grid cell or a baseline replica.
struct RunRecord {
  std::string run_key;
  std::string group;  // "segment" or "baseline"
  std::size_t index = 0;  // segment or baseline index within the plan
  std::string kind;   // short | medium | long | fresh | mix | cross
  std::string parent;  // parent checkpoint key, empty when freshly initialized
  std::uint64_t set_size = 0;
  std::uint64_t seed_index = 0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string failure;
  bool stopped_early = false;
  std::vector<CheckpointRef> checkpoints;
  double wall_seconds = 0.0;
};

inline nlohmann::json to_json(const CheckpointRef& c) {
  nlohmann::json lineage = nlohmann::json::array();
  for (const auto& s : c.lineage) lineage.push_back(to_json(s));
  return {{"key", c.key}, {"lineage", lineage}, {"val_loss", c.val_loss}, {"file", c.file}};
}

inline CheckpointRef checkpoint_ref_from_json(const nlohmann::json& j) {
  CheckpointRef c;
  c.key = j.at("key").get<std::string>();
  for (const auto& s : j.at("lineage")) c.lineage.push_back(stage_from_json(s));
  c.val_loss = j.at("val_loss").get<double>();
  c.file = j.at("file").get<std::string>();
  return c;
}

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json cps = nlohmann::json::array();
  for (const auto& c : r.checkpoints) cps.push_back(to_json(c));
  return {{"run", r.run_key},       {"group", r.group},     {"index", r.index},
          {"kind", r.kind},         {"parent", r.parent},   {"set_size", r.set_size},
          {"seed_index", r.seed_index}, {"seed", r.seed},   {"failed", r.failed},
          {"failure", r.failure},   {"stopped_early", r.stopped_early},
          {"checkpoints", cps},     {"wall_seconds", r.wall_seconds}};
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.run_key = j.at("run").get<std::string>();
  r.group = j.at("group").get<std::string>();
  r.index = j.at("index").get<std::size_t>();
  r.kind = j.at("kind").get<std::string>();
  r.parent = j.at("parent").get<std::string>();
  r.set_size = j.at("set_size").get<std::uint64_t>();
  r.seed_index = j.at("seed_index").get<std::uint64_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.failed = j.at("failed").get<bool>();
  r.failure = j.value("failure", "");
  r.stopped_early = j.value("stopped_early", false);
  for (const auto& c : j.at("checkpoints")) r.checkpoints.push_back(checkpoint_ref_from_json(c));
  r.wall_seconds = j.value("wall_seconds", 0.0);
  return r;
}

// Append-only record of finished runs. Completions from several workers are
// serialized through one mutex. A torn final line (from an interrupted write)
// is dropped on load.
class LineageStore {
 public:
  explicit LineageStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
    load();
  }

  static constexpr const char* kFileName = "lineage.jsonl";

  const std::filesystem::path& dir() const noexcept { return dir_; }
  std::filesystem::path file() const { return dir_ / kFileName; }

  std::optional<RunRecord> find(const std::string& run_key) const {
    std::lock_guard lock(mu_);
    const auto it = by_key_.find(run_key);
    if (it == by_key_.end()) return std::nullopt;
    return records_[it->second];
  }

  std::vector<RunRecord> records() const {
    std::lock_guard lock(mu_);
    return records_;
  }

  void append(const RunRecord& r) {
    std::lock_guard lock(mu_);
    if (by_key_.contains(r.run_key)) return;
    std::ofstream out(file(), std::ios::binary | std::ios::app);
    if (!out) throw IoError("cannot append to '" + file().string() + "'");
    out << to_json(r).dump() << '\n';
    out.flush();
    if (!out) throw IoError("write failed for '" + file().string() + "'");
    by_key_.emplace(r.run_key, records_.size());
    records_.push_back(r);
  }

 private:
  void load() {
    const auto path = file();
    if (!std::filesystem::exists(path)) return;
    const auto text = read_text_file(path);
    std::size_t pos = 0;
    std::size_t good_end = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      const bool last = nl == std::string::npos;
      const auto line = std::string_view(text).substr(pos, last ? std::string::npos : nl - pos);
      ++line_no;
      try {
        if (last) throw FormatError("unterminated line");
        if (!line.empty()) {
          auto r = run_record_from_json(nlohmann::json::parse(line));
          if (!by_key_.contains(r.run_key)) {
            by_key_.emplace(r.run_key, records_.size());
            records_.push_back(std::move(r));
          }
        }
      } catch (const std::exception& e) {
        const bool trailing = last || text.find_first_not_of('\n', nl + 1) == std::string::npos;
        if (!trailing) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        break;
      }
      pos = last ? text.size() : nl + 1;
      good_end = pos;
    }
    if (good_end != text.size()) std::filesystem::resize_file(path, good_end);
  }

  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::vector<RunRecord> records_;
  std::unordered_map<std::string, std::size_t> by_key_;
};

// ---------------------------------------------------------------------------
// Inputs

inline std::string pool_file_name(PoolLabel label) { return std::string(to_string(label)) + ".tsv"; }
inline constexpr const char* kVocabFileName = "vocab.tsv";

// Pools and vocabulary as prepared on disk. Absent classes stay empty.
struct ExperimentInputs {
  Vocabulary vocab;
  std::array<std::optional<PairPool>, 3> length;
  std::optional<PairPool> cross;
};

inline std::vector<LengthClass> classes_needed(const CurriculumPlan& plan) {
  std::vector<LengthClass> out;
  auto add = [&](LengthClass c) {
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  };
  for (const auto& s : plan.segments) add(s.length_class);
  for (const auto& b : plan.baselines) {
    if (b.kind == BaselineKind::Mix) {
      add(LengthClass::Short);
      add(LengthClass::Medium);
      add(LengthClass::Long);
    }
  }
  return out;
}

inline bool needs_cross(const CurriculumPlan& plan) {
  return std::any_of(plan.baselines.begin(), plan.baselines.end(),
                     [](const BaselineSpec& b) { return b.kind == BaselineKind::Cross; });
}

inline ExperimentInputs load_inputs(const std::filesystem::path& data_dir, const CurriculumPlan& plan) {
  ExperimentInputs in;
  in.vocab = read_vocab(data_dir / kVocabFileName);
  for (auto c : classes_needed(plan)) {
    const auto label = pool_label_of(c);
    in.length[static_cast<std::size_t>(c)] = read_pool(data_dir / pool_file_name(label), label);
  }
  if (needs_cross(plan)) in.cross = read_pool(data_dir / pool_file_name(PoolLabel::Cross), PoolLabel::Cross);
  return in;
}

// Training remainders and encoded validation sets for one plan.
struct ExperimentData {
  Vocabulary vocab;
  ModelConfig model;
  std::array<PairPool, 3> remainders;
  PairPool cross;
  std::map<std::pair<LengthClass, std::size_t>, std::vector<EncodedPair>> validation;
  std::map<std::string, std::string> digests;  // pool label -> content digest

  const std::vector<EncodedPair>& val(LengthClass c, std::size_t label) const {
    const auto it = validation.find({c, label});
    if (it == validation.end()) {
      throw EmptyValidationSet();
    }
    return it->second;
  }
};

// Size labels that need a validation set for class c.
inline std::vector<std::size_t> validation_labels(const CurriculumPlan& plan, LengthClass c) {
  std::vector<std::size_t> labels;
  for (const auto& s : plan.segments) {
    if (s.length_class == c) labels.insert(labels.end(), s.set_sizes.begin(), s.set_sizes.end());
  }
  if (c == plan.final_segment().length_class) {
    for (const auto& b : plan.baselines) labels.insert(labels.end(), b.set_sizes.begin(), b.set_sizes.end());
  }
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  return labels;
}

// For every class used by a segment, holds out val_size pairs per size label
// (one draw with a dedicated seed, chunked by label). Training remainders and
// the cross pool exclude every held-out pair.
inline ExperimentData prepare_data(const CurriculumPlan& plan, ExperimentInputs inputs) {
  ExperimentData d;
  d.model = plan.model;
  d.model.vocab_size = inputs.vocab.size();
  d.model.validate();
  std::unordered_set<std::string> held_keys;
  for (std::size_t ci = 0; ci < 3; ++ci) {
    const auto c = static_cast<LengthClass>(ci);
    auto& pool = inputs.length[ci];
    d.remainders[ci] = PairPool{pool_label_of(c), {}, {}};
    if (!pool) continue;
    d.digests[std::string(to_string(pool_label_of(c)))] = sha256_hex(pool_body(*pool));
    const auto seg = std::find_if(plan.segments.begin(), plan.segments.end(),
                                  [&](const SegmentSpec& s) { return s.length_class == c; });
    if (seg == plan.segments.end()) {
      d.remainders[ci] = std::move(*pool);
      continue;
    }
    const auto labels = validation_labels(plan, c);
    const std::size_t want = seg->val_size * labels.size();
    auto split = split_holdout(*pool, want, derive_key(plan.master_seed, "validation", to_string(c)));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      std::vector<EncodedPair> val;
      val.reserve(seg->val_size);
      for (std::size_t k = i * seg->val_size; k < (i + 1) * seg->val_size; ++k) {
        const auto& p = split.holdout.pairs[k];
        held_keys.insert(p.key());
        val.push_back(encode_pair(p, inputs.vocab, plan.trainer.reverse_source));
      }
      d.validation[{c, labels[i]}] = std::move(val);
    }
    d.remainders[ci] = std::move(split.remainder);
  }
  if (inputs.cross) {
    d.digests["cross"] = sha256_hex(pool_body(*inputs.cross));
    d.cross = without_keys(*inputs.cross, held_keys);
  } else {
    d.cross = PairPool{PoolLabel::Cross, {}, {}};
  }
  d.digests["vocab"] = inputs.vocab.digest();
  d.vocab = std::move(inputs.vocab);
  return d;
}

// ---------------------------------------------------------------------------
// Selection

// For every (parent, set size, epoch mark) cell present in `runs`, the
// checkpoint with the lowest validation loss across seeds; ties go to the
// lowest seed index. Failed runs never win. Cells are returned in the order
// their first run appears, marks ascending. A cell without any surviving
// checkpoint raises EmptyCell unless `allow_empty`.
inline std::vector<CheckpointRef> select_winners(const std::vector<RunRecord>& runs, const std::vector<int>& marks,
                                                 bool allow_empty = false) {
  std::vector<std::pair<std::string, std::uint64_t>> cells;
  std::map<std::pair<std::string, std::uint64_t>, std::vector<const RunRecord*>> members;
  for (const auto& r : runs) {
    const std::pair<std::string, std::uint64_t> cell{r.parent, r.set_size};
    auto& m = members[cell];
    if (m.empty()) cells.push_back(cell);
    m.push_back(&r);
  }
  std::vector<CheckpointRef> winners;
  for (const auto& cell : cells) {
    for (int mark : marks) {
      const CheckpointRef* best = nullptr;
      std::uint64_t best_seed = 0;
      for (const auto* r : members[cell]) {
        if (r->failed) continue;
        for (const auto& c : r->checkpoints) {
          if (c.last().epochs != mark) continue;
          if (!best || c.val_loss < best->val_loss || (c.val_loss == best->val_loss && r->seed_index < best_seed)) {
            best = &c;
            best_seed = r->seed_index;
          }
        }
      }
      if (best) {
        winners.push_back(*best);
      } else if (!allow_empty) {
        throw EmptyCell(cell.second, mark);
      }
    }
  }
  return winners;
}

// Best checkpoint per set size at the final epoch mark.
inline std::vector<CheckpointRef> best_of_replicas(const std::vector<RunRecord>& runs, int final_mark,
                                                   bool allow_empty = false) {
  return select_winners(runs, {final_mark}, allow_empty);
}

// ceil(fraction * n) checkpoints chosen uniformly without replacement,
// returned in their original order.
inline std::vector<CheckpointRef> subsample_lineages(const std::vector<CheckpointRef>& checkpoints, double fraction,
                                                     std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("carry_fraction", "must lie in (0, 1]");
  const auto k = std::min(checkpoints.size(), carried_count(fraction, checkpoints.size()));
  auto idx = sample_indices(checkpoints.size(), k, seed);
  std::sort(idx.begin(), idx.end());
  std::vector<CheckpointRef> out;
  out.reserve(k);
  for (auto i : idx) out.push_back(checkpoints[i]);
  return out;
}

inline std::vector<CheckpointRef> all_checkpoints(const std::vector<RunRecord>& runs) {
  std::vector<CheckpointRef> out;
  for (const auto& r : runs) {
    if (r.failed) continue;
    out.insert(out.end(), r.checkpoints.begin(), r.checkpoints.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Execution

using LogFn = std::function<void(const std::string&)>;

struct RunOptions {
  std::size_t workers = 1;
  LogFn log;
};

// One training run to perform.
struct Job {
  std::string run_key;
  std::string group;
  std::size_t index = 0;
  std::string kind;
  std::optional<CheckpointRef> parent;
  std::uint64_t set_size = 0;
  std::uint64_t seed_index = 0;
  std::uint64_t seed = 0;  // keys init (when fresh) and batch order
  std::vector<int> marks;
  const std::vector<EncodedPair>* train = nullptr;
  const std::vector<EncodedPair>* val = nullptr;
};

inline std::string run_file_stem(const std::string& run_key) {
  auto name = checkpoint_file_name(run_key);
  return name.substr(0, name.size() - 5);
}

inline RunRecord execute_job(const Job& job, const ExperimentData& data, const TrainConfig& base,
                             const std::filesystem::path& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  Parameters<float> init;
  Lineage parent_lineage;
  if (job.parent) {
    auto c = load_checkpoint(out_dir / job.parent->file);
    if (!c.params.matches(data.model)) throw FormatError("checkpoint '" + job.parent->key + "' has another shape");
    init = std::move(c.params);
    parent_lineage = job.parent->lineage;
  } else {
    auto m = data.model;
    m.seed = derive_key(job.seed, "init");
    init = init_params<float>(m);
  }
  TrainConfig cfg = base;
  cfg.epoch_checkpoints = job.marks;
  cfg.shuffle_seed = job.seed;

  const auto metrics_path = out_dir / "metrics" / (run_file_stem(job.run_key) + ".jsonl");
  std::filesystem::create_directories(metrics_path.parent_path());
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  if (!metrics) throw IoError("cannot open '" + metrics_path.string() + "' for writing");

  Lineage with_stage = parent_lineage;
  StageRecord stage{job.kind, job.set_size, 0, job.seed_index, job.seed};
  with_stage.push_back(stage);
  const auto key = lineage_key(with_stage);
  auto res = train_segment(init, *job.train, *job.val, data.model, cfg, {parent_lineage, stage},
                           [&](const EpochRecord& r) { metrics << metrics_line(key, r) << '\n' << std::flush; });

  RunRecord rec;
  rec.run_key = job.run_key;
  rec.group = job.group;
  rec.index = job.index;
  rec.kind = job.kind;
  rec.parent = job.parent ? job.parent->key : std::string();
  rec.set_size = job.set_size;
  rec.seed_index = job.seed_index;
  rec.seed = job.seed;
  rec.failed = res.failed;
  rec.failure = res.failure;
  rec.stopped_early = res.stopped_early;
  for (const auto& c : res.checkpoints) {
    const auto file = std::filesystem::path("checkpoints") / checkpoint_file_name(c.key());
    save_checkpoint(out_dir / file, c);
    rec.checkpoints.push_back({c.key(), c.lineage, c.val_loss, file.generic_string()});
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

namespace detail {

inline std::string format_loss(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

// Runs the jobs not yet in the store on up to `workers` threads and returns
// the records of all jobs in job order. The first exception stops further
// dispatch and is rethrown after in-flight jobs finish.
inline std::vector<RunRecord> run_jobs(const std::vector<Job>& jobs, const ExperimentData& data,
                                       const TrainConfig& base, LineageStore& store, const RunOptions& opt) {
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!store.find(jobs[i].run_key)) pending.push_back(i);
  }
  if (opt.log && pending.size() < jobs.size()) {
    opt.log("event=resume skipped=" + std::to_string(jobs.size() - pending.size()) +
            " pending=" + std::to_string(pending.size()));
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    while (!stop) {
      const auto k = next.fetch_add(1);
      if (k >= pending.size()) return;
      const auto& job = jobs[pending[k]];
      try {
        auto rec = execute_job(job, data, base, store.dir());
        store.append(rec);
        if (opt.log) {
          std::string line = "event=run_done run=" + job.run_key;
          if (rec.failed) {
            line += " status=failed failure=\"" + rec.failure + "\"";
          } else {
            line += " status=ok";
            if (!rec.checkpoints.empty()) line += " val_loss=" + detail::format_loss(rec.checkpoints.back().val_loss);
          }
          char secs[32];
          std::snprintf(secs, sizeof secs, "%.1f", rec.wall_seconds);
          opt.log(line + " seconds=" + secs);
        }
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        stop = true;
      }
    }
  };
  const auto n_threads = std::min<std::size_t>(std::max<std::size_t>(opt.workers, 1), pending.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (error) std::rethrow_exception(error);

  std::vector<RunRecord> out;
  out.reserve(jobs.size());
  for (const auto& j : jobs) out.push_back(*store.find(j.run_key));
  return out;
}

inline std::vector<EncodedPair> encode_all(const PairPool& pool, const Vocabulary& v, bool reverse) {
  return encode_pool(pool, v, reverse);
}

// Training sets are drawn once per (segment, size) and shared by every
// parent and seed of that cell.
inline std::uint64_t training_set_seed(const CurriculumPlan& plan, std::size_t segment, std::size_t size) {
  return derive_key(plan.master_seed, "train", segment, size);
}

inline std::uint64_t cell_seed(const CurriculumPlan& plan, std::size_t segment, const std::string& parent_key,
                               std::size_t size, std::size_t seed_index) {
  return derive_key(plan.master_seed, "cell", segment, parent_key, size, seed_index);
}

// Trains every (parent x size x seed) cell of segment `s`. With no parents
// each cell starts from fresh parameters.
inline std::vector<RunRecord> run_segment_grid(const CurriculumPlan& plan, std::size_t s,
                                               const std::vector<CheckpointRef>& parents, const ExperimentData& data,
                                               LineageStore& store, const RunOptions& opt) {
  const auto& spec = plan.segments[s];
  const auto kind = std::string(to_string(spec.length_class));
  const auto& pool = data.remainders[static_cast<std::size_t>(spec.length_class)];
  std::map<std::size_t, std::vector<EncodedPair>> train_sets;

  std::vector<std::optional<CheckpointRef>> roots;
  if (parents.empty()) {
    roots.emplace_back();
  } else {
    roots.assign(parents.begin(), parents.end());
  }
  std::vector<Job> jobs;
  for (const auto& parent : roots) {
    const std::string parent_key = parent ? parent->key : std::string();
    for (auto size : spec.set_sizes) {
      for (std::size_t k = 0; k < spec.seeds_per_cell; ++k) {
        Job j;
        j.group = "segment";
        j.index = s;
        j.kind = kind;
        j.parent = parent;
        j.set_size = size;
        j.seed_index = k;
        j.seed = cell_seed(plan, s, parent_key, size, k);
        j.run_key = (parent_key.empty() ? "" : parent_key + "/") + kind + "-" + std::to_string(size) + "-s" +
                    std::to_string(k);
        j.marks = spec.epoch_checkpoints;
        j.val = &data.val(spec.length_class, size);
        jobs.push_back(std::move(j));
      }
    }
  }
  // Sampling and encoding are skipped entirely when every run is on record.
  const bool any_pending =
      std::any_of(jobs.begin(), jobs.end(), [&](const Job& j) { return !store.find(j.run_key); });
  for (auto size : spec.set_sizes) {
    auto& set = train_sets[size];
    if (any_pending) {
      set = encode_all(sample_uniform(pool, size, training_set_seed(plan, s, size)), data.vocab,
                       plan.trainer.reverse_source);
    }
  }
  for (auto& j : jobs) j.train = &train_sets.at(j.set_size);
  if (opt.log) {
    opt.log("event=segment_start segment=" + std::to_string(s) + " class=" + kind +
            " parents=" + std::to_string(parents.size()) + " runs=" + std::to_string(jobs.size()));
  }
  return run_jobs(jobs, data, plan.trainer, store, opt);
}

// Trains `replicas` fresh models per size on the baseline's training set and
// evaluates on the final class's validation set of matching size label.
inline std::vector<RunRecord> run_baseline(const CurriculumPlan& plan, std::size_t b, const ExperimentData& data,
                                           LineageStore& store, const RunOptions& opt) {
  const auto& spec = plan.baselines[b];
  const auto kind = std::string(to_string(spec.kind));
  const auto final_class = plan.final_segment().length_class;
  const auto last = plan.segments.size() - 1;
  std::vector<Job> jobs;
  for (auto size : spec.set_sizes) {
    for (std::size_t k = 0; k < spec.replicas; ++k) {
      Job j;
      j.group = "baseline";
      j.index = b;
      j.kind = kind;
      j.set_size = size;
      j.seed_index = k;
      j.seed = derive_key(plan.master_seed, "baseline", kind, size, k);
      j.run_key = kind + "-" + std::to_string(size) + "-s" + std::to_string(k);
      j.marks = spec.epoch_checkpoints;
      j.val = &data.val(final_class, size);
      jobs.push_back(std::move(j));
    }
  }
  const bool any_pending =
      std::any_of(jobs.begin(), jobs.end(), [&](const Job& j) { return !store.find(j.run_key); });
  std::map<std::size_t, std::vector<EncodedPair>> train_sets;
  for (auto size : spec.set_sizes) {
    auto& set = train_sets[size];
    if (!any_pending) continue;
    PairPool pairs;
    switch (spec.kind) {
      case BaselineKind::Fresh:
        // Same draw as the final segment at this size.
        pairs = sample_uniform(data.remainders[static_cast<std::size_t>(final_class)], size,
                               training_set_seed(plan, last, size));
        break;
      case BaselineKind::Mix:
        pairs = build_mix_set(data.remainders[0], data.remainders[1], data.remainders[2], size,
                              derive_key(plan.master_seed, "baseline-train", kind, size));
        break;
      case BaselineKind::Cross:
        pairs = build_cross_set(data.cross, size, derive_key(plan.master_seed, "baseline-train", kind, size));
        break;
    }
    set = encode_all(pairs, data.vocab, plan.trainer.reverse_source);
  }
  for (auto& j : jobs) j.train = &train_sets.at(j.set_size);
  if (opt.log) opt.log("event=baseline_start kind=" + kind + " runs=" + std::to_string(jobs.size()));
  return run_jobs(jobs, data, plan.trainer, store, opt);
}

// Parents for segment s: winners of the first segment feed the second, later
// segments inherit every checkpoint of their predecessor, and the final
// segment's parents are subsampled by carry_fraction.
inline std::vector<CheckpointRef> segment_parents(const CurriculumPlan& plan, std::size_t s,
                                                  const std::vector<RunRecord>& previous) {
  if (s == 0) return {};
  auto parents = s == 1 ? select_winners(previous, plan.segments[0].epoch_checkpoints, true)
                        : all_checkpoints(previous);
  if (s + 1 == plan.segments.size()) {
    parents = subsample_lineages(parents, plan.carry_fraction, derive_key(plan.master_seed, "carry"));
  }
  return parents;
}

struct ExperimentResult {
  std::vector<std::vector<RunRecord>> segments;
  std::vector<std::vector<RunRecord>> baselines;
  std::vector<std::vector<CheckpointRef>> parents;  // parents used by each segment
};

inline constexpr const char* kPlanFileName = "plan.json";

// Records the plan in out_dir, or checks that out_dir already belongs to it.
inline void bind_plan(const CurriculumPlan& plan, const std::filesystem::path& out_dir) {
  const auto path = out_dir / kPlanFileName;
  const auto digest = plan_digest(plan);
  if (std::filesystem::exists(path)) {
    const auto stored = plan_from_json(nlohmann::json::parse(read_text_file(path)));
    if (plan_digest(stored) != digest) {
      throw ConfigError("plan", "'" + out_dir.string() + "' holds results of a different plan");
    }
    return;
  }
  auto j = to_json(plan);
  write_text_file(path, j.dump(2) + "\n");
}

inline ExperimentResult run_plan(const CurriculumPlan& plan, const ExperimentData& data,
                                 const std::filesystem::path& out_dir, const RunOptions& opt = {}) {
  plan.validate();
  std::filesystem::create_directories(out_dir);
  bind_plan(plan, out_dir);
  LineageStore store(out_dir);
  ExperimentResult result;
  std::vector<RunRecord> previous;
  for (std::size_t s = 0; s < plan.segments.size(); ++s) {
    auto parents = segment_parents(plan, s, previous);
    if (s > 0 && parents.empty()) {
      throw EmptyCell(plan.segments[s - 1].set_sizes.front(), plan.segments[s - 1].epoch_checkpoints.front());
    }
    previous = run_segment_grid(plan, s, parents, data, store, opt);
    result.parents.push_back(std::move(parents));
    result.segments.push_back(previous);
  }
  for (std::size_t b = 0; b < plan.baselines.size(); ++b) {
    result.baselines.push_back(run_baseline(plan, b, data, store, opt));
  }
  return result;
}

}  // namespace currseq

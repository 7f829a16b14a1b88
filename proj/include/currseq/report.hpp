#pragma once

// Tables regenerated from the lineage store: the short-epoch analysis, the
// curriculum-vs-baseline comparison and the fresh-vs-curriculum directional
// check. Every loss cell carries the id of the checkpoint it came from.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "currseq/curriculum.hpp"
#include "currseq/digest.hpp"
#include "currseq/plan.hpp"
#include "currseq/pool_io.hpp"

namespace currseq {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string csv() const {
    std::string out;
    auto emit = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        const bool quote = cells[i].find_first_of(",\"\n") != std::string::npos;
        if (quote) {
          out += '"';
          for (char ch : cells[i]) {
            if (ch == '"') out += '"';
            out += ch;
          }
          out += '"';
        } else {
          out += cells[i];
        }
      }
      out += '\n';
    };
    emit(header);
    for (const auto& r : rows) emit(r);
    return out;
  }
};

// Records of one experiment grouped the way run_plan produced them, each
// group sorted by run key.
inline ExperimentResult collect_records(const CurriculumPlan& plan, const std::vector<RunRecord>& records) {
  ExperimentResult r;
  r.segments.resize(plan.segments.size());
  r.baselines.resize(plan.baselines.size());
  for (const auto& rec : records) {
    if (rec.group == "segment" && rec.index < r.segments.size()) r.segments[rec.index].push_back(rec);
    if (rec.group == "baseline" && rec.index < r.baselines.size()) r.baselines[rec.index].push_back(rec);
  }
  auto by_key = [](const RunRecord& a, const RunRecord& b) { return a.run_key < b.run_key; };
  for (auto& g : r.segments) std::sort(g.begin(), g.end(), by_key);
  for (auto& g : r.baselines) std::sort(g.begin(), g.end(), by_key);
  return r;
}

namespace detail {

inline std::string column_name(LengthClass c) {
  switch (c) {
    case LengthClass::Short: return "Short";
    case LengthClass::Medium: return "Med";
    case LengthClass::Long: return "Long";
    case LengthClass::Overlong: return "Overlong";
  }
  return "?";
}

inline std::string title_case(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

// Lower loss first, then lexicographic checkpoint key.
inline bool better(const CheckpointRef& a, const CheckpointRef& b) {
  return a.val_loss < b.val_loss || (a.val_loss == b.val_loss && a.key < b.key);
}

inline std::vector<CheckpointRef> checkpoints_at(const std::vector<RunRecord>& runs, int epochs) {
  std::vector<CheckpointRef> out;
  for (const auto& c : all_checkpoints(runs)) {
    if (c.last().epochs == epochs) out.push_back(c);
  }
  return out;
}

inline int final_mark(const SegmentSpec& s) { return s.epoch_checkpoints.back(); }

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// For each first-segment size: among second-segment checkpoints trained on
// the largest second-segment set for the full schedule, the first-segment
// epoch count of the lowest validation loss. Sizes without such a
// checkpoint are left blank.
inline Table table_short_epoch_analysis(const CurriculumPlan& plan, const ExperimentResult& r) {
  const auto first = detail::column_name(plan.segments[0].length_class);
  Table t{{first + " TD", first + " Epochs", "Val. Loss", "Checkpoint"}, {}};
  if (plan.segments.size() < 2) return t;
  const auto& next = plan.segments[1];
  const auto largest = next.set_sizes.back();
  const auto candidates = detail::checkpoints_at(r.segments.size() > 1 ? r.segments[1] : std::vector<RunRecord>{},
                                                 detail::final_mark(next));
  for (auto size : plan.segments[0].set_sizes) {
    const CheckpointRef* best = nullptr;
    for (const auto& c : candidates) {
      if (c.last().set_size != largest || c.lineage.front().set_size != size) continue;
      if (!best || detail::better(c, *best)) best = &c;
    }
    if (best) {
      t.rows.push_back({std::to_string(size), std::to_string(best->lineage.front().epochs),
                        detail::format_loss(best->val_loss), best->key});
    } else {
      t.rows.push_back({std::to_string(size), "", "", ""});
    }
  }
  return t;
}

inline std::vector<std::string> type_comparison_header(const CurriculumPlan& plan) {
  const auto& segs = plan.segments;
  std::vector<std::string> h{"Type", "Val. Loss", detail::column_name(segs.back().length_class) + " TD"};
  for (std::size_t s = segs.size() - 1; s-- > 0;) {
    const auto name = detail::column_name(segs[s].length_class);
    h.push_back(name + " TD");
    h.push_back(name + " Epochs");
  }
  h.push_back("Checkpoint");
  return h;
}

// Worst three and best three final-segment checkpoints (at the full schedule)
// per final-segment size, then the best replica of each baseline per size.
// "TD" of a baseline row is the validation-set size label.
inline Table table_type_comparison(const CurriculumPlan& plan, const ExperimentResult& r, std::size_t block = 3) {
  Table t{type_comparison_header(plan), {}};
  const auto width = t.header.size();
  const auto& final_spec = plan.final_segment();
  const auto finals = detail::checkpoints_at(r.segments.empty() ? std::vector<RunRecord>{} : r.segments.back(),
                                             detail::final_mark(final_spec));

  auto curriculum_row = [&](const std::string& type, const CheckpointRef& c) {
    std::vector<std::string> row{type, detail::format_loss(c.val_loss), std::to_string(c.last().set_size)};
    for (std::size_t s = c.lineage.size() - 1; s-- > 0;) {
      row.push_back(std::to_string(c.lineage[s].set_size));
      row.push_back(std::to_string(c.lineage[s].epochs));
    }
    row.resize(width - 1);
    row.push_back(c.key);
    return row;
  };

  for (const bool worst : {true, false}) {
    for (auto size : final_spec.set_sizes) {
      std::vector<CheckpointRef> group;
      for (const auto& c : finals) {
        if (c.last().set_size == size) group.push_back(c);
      }
      std::sort(group.begin(), group.end(), detail::better);
      if (worst) std::reverse(group.begin(), group.end());
      for (std::size_t i = 0; i < std::min(block, group.size()); ++i) {
        t.rows.push_back(curriculum_row(worst ? "DT (worst)" : "DT (best)", group[i]));
      }
    }
  }
  for (std::size_t b = 0; b < plan.baselines.size(); ++b) {
    const auto& spec = plan.baselines[b];
    const auto best = best_of_replicas(b < r.baselines.size() ? r.baselines[b] : std::vector<RunRecord>{},
                                       spec.epoch_checkpoints.back(), true);
    for (auto size : spec.set_sizes) {
      const auto it = std::find_if(best.begin(), best.end(),
                                   [&](const CheckpointRef& c) { return c.last().set_size == size; });
      std::vector<std::string> row{detail::title_case(std::string(to_string(spec.kind)))};
      row.push_back(it == best.end() ? "" : detail::format_loss(it->val_loss));
      row.push_back(std::to_string(size));
      row.resize(width - 1);
      row.push_back(it == best.end() ? "" : it->key);
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

// Fresh vs curriculum on the final class's validation set, per size label
// shared by the final segment and the fresh baseline.
struct DirectionalRow {
  std::uint64_t set_size = 0;
  std::size_t curriculum_runs = 0;
  double curriculum_median = 0.0;
  double curriculum_worst = 0.0;
  std::string curriculum_worst_key;
  std::size_t fresh_runs = 0;
  double fresh_median = 0.0;
  double fresh_best = 0.0;
  std::string fresh_best_key;

  bool median_better() const { return curriculum_median < fresh_median; }
  bool worst_beats_best_fresh() const { return curriculum_worst < fresh_best; }
};

inline std::vector<DirectionalRow> directional_comparison(const CurriculumPlan& plan, const ExperimentResult& r) {
  std::vector<DirectionalRow> out;
  const auto fresh = std::find_if(plan.baselines.begin(), plan.baselines.end(),
                                  [](const BaselineSpec& b) { return b.kind == BaselineKind::Fresh; });
  if (fresh == plan.baselines.end() || r.segments.empty()) return out;
  const auto b = static_cast<std::size_t>(fresh - plan.baselines.begin());
  const auto finals = detail::checkpoints_at(r.segments.back(), detail::final_mark(plan.final_segment()));
  const auto fresh_cps =
      b < r.baselines.size() ? detail::checkpoints_at(r.baselines[b], fresh->epoch_checkpoints.back())
                             : std::vector<CheckpointRef>{};
  for (auto size : plan.final_segment().set_sizes) {
    if (std::find(fresh->set_sizes.begin(), fresh->set_sizes.end(), size) == fresh->set_sizes.end()) continue;
    std::vector<CheckpointRef> cur, fr;
    for (const auto& c : finals) {
      if (c.last().set_size == size) cur.push_back(c);
    }
    for (const auto& c : fresh_cps) {
      if (c.last().set_size == size) fr.push_back(c);
    }
    if (cur.empty() || fr.empty()) continue;
    std::sort(cur.begin(), cur.end(), detail::better);
    std::sort(fr.begin(), fr.end(), detail::better);
    auto losses = [](const std::vector<CheckpointRef>& v) {
      std::vector<double> out;
      for (const auto& c : v) out.push_back(c.val_loss);
      return out;
    };
    DirectionalRow row;
    row.set_size = size;
    row.curriculum_runs = cur.size();
    row.curriculum_median = detail::median(losses(cur));
    row.curriculum_worst = cur.back().val_loss;
    row.curriculum_worst_key = cur.back().key;
    row.fresh_runs = fr.size();
    row.fresh_median = detail::median(losses(fr));
    row.fresh_best = fr.front().val_loss;
    row.fresh_best_key = fr.front().key;
    out.push_back(row);
  }
  return out;
}

inline Table directional_table(const std::vector<DirectionalRow>& rows) {
  Table t{{"Long TD", "Curriculum Runs", "Curriculum Median", "Fresh Runs", "Fresh Median", "Median Better",
           "Curriculum Worst", "Fresh Best", "Worst Beats Best Fresh", "Worst Checkpoint", "Best Fresh Checkpoint"},
          {}};
  for (const auto& r : rows) {
    t.rows.push_back({std::to_string(r.set_size), std::to_string(r.curriculum_runs),
                      detail::format_loss(r.curriculum_median), std::to_string(r.fresh_runs),
                      detail::format_loss(r.fresh_median), r.median_better() ? "pass" : "fail",
                      detail::format_loss(r.curriculum_worst), detail::format_loss(r.fresh_best),
                      r.worst_beats_best_fresh() ? "pass" : "fail", r.curriculum_worst_key, r.fresh_best_key});
  }
  return t;
}

struct ReportFiles {
  std::filesystem::path table1, table2, directional, manifest;
};

inline ReportFiles report_paths(const std::filesystem::path& out_dir) {
  const auto d = out_dir / "report";
  return {d / "table1_short_epochs.csv", d / "table2_type_comparison.csv", d / "directional.csv",
          d / "manifest.json"};
}

// Writes the CSV tables and a manifest of digests and per-run wall times.
inline ReportFiles write_report(const CurriculumPlan& plan, const std::vector<RunRecord>& records,
                                const std::filesystem::path& out_dir,
                                const std::map<std::string, std::string>& data_digests = {}) {
  const auto r = collect_records(plan, records);
  const auto files = report_paths(out_dir);
  const auto t1 = table_short_epoch_analysis(plan, r).csv();
  const auto t2 = table_type_comparison(plan, r).csv();
  const auto dir = directional_table(directional_comparison(plan, r)).csv();
  write_text_file(files.table1, t1);
  write_text_file(files.table2, t2);
  write_text_file(files.directional, dir);

  nlohmann::json runs = nlohmann::json::array();
  for (const auto& g : {&r.segments, &r.baselines}) {
    for (const auto& group : *g) {
      for (const auto& rec : group) {
        runs.push_back({{"run", rec.run_key},
                        {"failed", rec.failed},
                        {"wall_seconds", rec.wall_seconds},
                        {"checkpoints", rec.checkpoints.size()}});
      }
    }
  }
  nlohmann::json manifest{{"plan_digest", plan_digest(plan)},
                          {"data_digests", data_digests},
                          {"tables",
                           {{files.table1.filename().string(), sha256_hex(t1)},
                            {files.table2.filename().string(), sha256_hex(t2)},
                            {files.directional.filename().string(), sha256_hex(dir)}}},
                          {"runs", runs}};
  write_text_file(files.manifest, manifest.dump(2) + "\n");
  return files;
}

}  // namespace currseq

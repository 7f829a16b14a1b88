#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "currseq/currseq.hpp"
#include "support/toy_experiment.hpp"

using namespace currseq;
using oracle::deterministic_files;
using oracle::fresh_dir;
using oracle::toy_data;

namespace {

CurriculumPlan smoke_plan() {
  return plan_from_json(nlohmann::json::parse(R"({
    "master_seed": 7, "carry_fraction": "1/2",
    "model": {"embed_dim": 6, "hidden_dim": 8},
    "trainer": {"batch_size": 16, "learning_rate": 0.01},
    "segments": [
      {"class": "short", "sizes": [20, 40], "seeds": 2, "checkpoints": [1, 2], "val_size": 10},
      {"class": "medium", "sizes": [20], "checkpoints": [1, 2], "val_size": 10},
      {"class": "long", "sizes": [20], "checkpoints": [2], "val_size": 10}],
    "baselines": [
      {"kind": "fresh", "sizes": [20], "replicas": 2},
      {"kind": "mix", "sizes": [20], "replicas": 2},
      {"kind": "cross", "sizes": [20], "replicas": 2}]})"));
}

// Random run table: `parents` x `sizes` x `seeds` runs with marks {2,4,6},
// losses drawn from a handful of values so ties are common, some runs failed.
std::vector<RunRecord> random_runs(KeyedRng& rng, std::size_t parents, std::size_t sizes, std::size_t seeds) {
  std::vector<RunRecord> runs;
  for (std::size_t p = 0; p < parents; ++p) {
    for (std::size_t s = 0; s < sizes; ++s) {
      for (std::size_t k = 0; k < seeds; ++k) {
        RunRecord r;
        r.parent = parents == 1 ? "" : "p" + std::to_string(p);
        r.set_size = 100 * (s + 1);
        r.seed_index = k;
        r.run_key = r.parent + "/" + std::to_string(r.set_size) + "-" + std::to_string(k);
        r.failed = rng.uniform01() < 0.1;
        for (int e : {2, 4, 6}) {
          CheckpointRef c;
          c.lineage = {{"short", r.set_size, e, k, 0}};
          c.key = r.run_key + "-e" + std::to_string(e);
          c.val_loss = static_cast<double>(rng.below(5)) * 0.25 + 2.0;
          if (!r.failed) r.checkpoints.push_back(c);
        }
        runs.push_back(std::move(r));
      }
    }
  }
  KeyedRng order(derive_key(rng.key(), "order"));
  shuffle_in_place(std::span<RunRecord>(runs), order);
  return runs;
}

}  // namespace

TEST(Plan, ParsesAndRejectsWithKeyNames) {
  const auto plan = smoke_plan();
  EXPECT_EQ(plan.segments.size(), 3u);
  EXPECT_DOUBLE_EQ(plan.carry_fraction, 0.5);
  EXPECT_EQ(plan.segments[1].seeds_per_cell, 1u);
  EXPECT_EQ(plan.baselines[2].kind, BaselineKind::Cross);
  EXPECT_EQ(plan.baselines[0].epoch_checkpoints, std::vector<int>{2});

  auto expect_key = [](const std::string& text, const std::string& key) {
    try {
      plan_from_json(nlohmann::json::parse(text));
      ADD_FAILURE() << "accepted: " << text;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.key(), key) << e.what();
    }
  };
  expect_key(R"({"segments": []})", "master_seed");
  expect_key(R"({"master_seed": 1, "segments": []})", "segments");
  expect_key(R"({"master_seed": 1, "segments": [{"class": "short", "sizes": [5, 3]}]})", "segments[0].sizes");
  expect_key(R"({"master_seed": 1, "segments": [{"class": "tiny", "sizes": [5]}]})", "segments[0].class");
  expect_key(R"({"master_seed": 1, "segments": [{"class": "short", "sizes": [5], "seeds": 0}]})",
             "segments[0].seeds");
  expect_key(R"({"master_seed": 1, "carry_fraction": 0, "segments": [{"class": "short", "sizes": [5]}]})",
             "carry_fraction");
  expect_key(R"({"master_seed": 1, "bogus": 2, "segments": [{"class": "short", "sizes": [5]}]})", "bogus");
  expect_key(R"({"master_seed": 1, "segments": [{"class": "short", "sizes": [5]}],
                 "baselines": [{"kind": "other", "sizes": [5]}]})",
             "baselines[0].kind");
  expect_key(R"({"master_seed": 1, "segments": [{"class": "short", "sizes": [5]}],
                 "trainer": {"batch_size": "x"}})",
             "trainer.batch_size");
}

TEST(Plan, DigestIgnoresWorkersAndDataPath) {
  auto a = smoke_plan();
  auto b = a;
  b.workers = 4;
  b.data = "/elsewhere";
  EXPECT_EQ(plan_digest(a), plan_digest(b));
  b.master_seed = 8;
  EXPECT_NE(plan_digest(a), plan_digest(b));
  EXPECT_EQ(plan_digest(plan_from_json(to_json(a))), plan_digest(a));
}

TEST(Cardinality, ArithmeticAtFullGridShape) {
  SegmentSpec short_seg{LengthClass::Short, {10000, 50000, 200000, 500000, 1000000, 3000000}, 10, {2, 4, 6}, 1000};
  EXPECT_EQ(grid_parameter_sets(0, short_seg), 180u);
  SegmentSpec medium_seg{LengthClass::Medium, short_seg.set_sizes, 1, {2, 4, 6}, 1000};
  EXPECT_EQ(grid_models(18, medium_seg), 108u);
  EXPECT_EQ(grid_parameter_sets(18, medium_seg), 324u);
  EXPECT_EQ(carried_count(1.0 / 6.0, 324), 54u);
  EXPECT_EQ(carried_count(1.0 / 6.0, 81), 14u);
  EXPECT_EQ(carried_count(1.0, 7), 7u);
  SegmentSpec one{LengthClass::Long, {5}, 1, {2}, 1};
  EXPECT_EQ(grid_parameter_sets(1, one), 1u);
}

TEST(SelectWinners, MatchesBruteForceOnRandomTables) {
  for (std::uint64_t trial = 0; trial < 1000; ++trial) {
    KeyedRng rng(derive_key(99, "winners", trial));
    const auto parents = 1 + rng.below(3);
    const auto runs = random_runs(rng, parents, 1 + rng.below(4), 1 + rng.below(6));
    const auto winners = select_winners(runs, {2, 4, 6}, true);

    // Brute force: every (parent, size, mark) cell with a surviving run.
    std::map<std::tuple<std::string, std::uint64_t, int>, std::pair<double, std::uint64_t>> best;
    for (const auto& r : runs) {
      if (r.failed) continue;
      for (const auto& c : r.checkpoints) {
        const auto cell = std::make_tuple(r.parent, r.set_size, c.lineage.back().epochs);
        const auto cand = std::make_pair(c.val_loss, r.seed_index);
        auto it = best.find(cell);
        if (it == best.end() || cand < it->second) best[cell] = cand;
      }
    }
    ASSERT_EQ(winners.size(), best.size()) << "trial " << trial;
    for (const auto& w : winners) {
      const auto parent = w.key.substr(0, w.key.find('/'));
      const auto it = best.find({parent, w.last().set_size, w.last().epochs});
      ASSERT_NE(it, best.end());
      EXPECT_EQ(w.val_loss, it->second.first);
      EXPECT_EQ(w.last().seed_index, it->second.second);
    }
  }
}

TEST(SelectWinners, EmptyCellRaises) {
  RunRecord r;
  r.run_key = "a";
  r.set_size = 500;
  r.failed = true;
  try {
    select_winners({r}, {2});
    ADD_FAILURE();
  } catch (const EmptyCell& e) {
    EXPECT_NE(std::string(e.what()).find("500"), std::string::npos);
  }
  EXPECT_TRUE(select_winners({r}, {2}, true).empty());
}

TEST(SelectWinners, FullGridShapeYieldsEighteen) {
  KeyedRng rng(3);
  auto runs = random_runs(rng, 1, 6, 10);
  for (auto& r : runs) {
    if (r.failed) {
      r.failed = false;
      for (int e : {2, 4, 6}) r.checkpoints.push_back({r.run_key + std::to_string(e), {{"short", r.set_size, e, r.seed_index, 0}}, 3.0, ""});
    }
  }
  EXPECT_EQ(all_checkpoints(runs).size(), 180u);
  EXPECT_EQ(select_winners(runs, {2, 4, 6}).size(), 18u);
}

TEST(BestOfReplicas, MatchesExhaustiveMin) {
  for (std::uint64_t trial = 0; trial < 1000; ++trial) {
    KeyedRng rng(derive_key(7, "replicas", trial));
    const auto runs = random_runs(rng, 1, 1 + rng.below(3), 1 + rng.below(5));
    const auto best = best_of_replicas(runs, 6, true);
    std::map<std::uint64_t, double> brute;
    for (const auto& r : runs) {
      for (const auto& c : r.checkpoints) {
        if (c.last().epochs != 6) continue;
        auto it = brute.find(r.set_size);
        if (it == brute.end() || c.val_loss < it->second) brute[r.set_size] = c.val_loss;
      }
    }
    ASSERT_EQ(best.size(), brute.size());
    for (const auto& b : best) EXPECT_EQ(b.val_loss, brute.at(b.last().set_size));
  }
}

TEST(SubsampleLineages, CountsIdentityAndDeterminism) {
  std::vector<CheckpointRef> cps(324);
  for (std::size_t i = 0; i < cps.size(); ++i) cps[i].key = "c" + std::to_string(i);
  const auto sub = subsample_lineages(cps, 1.0 / 6.0, 11);
  EXPECT_EQ(sub.size(), 54u);
  std::set<std::string> keys;
  for (const auto& c : sub) keys.insert(c.key);
  EXPECT_EQ(keys.size(), 54u);
  EXPECT_EQ(sub.front().key, subsample_lineages(cps, 1.0 / 6.0, 11).front().key);

  const auto all = subsample_lineages(cps, 1.0, 3);
  ASSERT_EQ(all.size(), cps.size());
  for (std::size_t i = 0; i < cps.size(); ++i) EXPECT_EQ(all[i].key, cps[i].key);
  EXPECT_THROW(subsample_lineages(cps, 0.0, 1), ConfigError);
}

TEST(SubsampleLineages, InclusionUniformOverSeeds) {
  const std::size_t n = 30;
  const double fraction = 0.2;
  const std::size_t seeds = 2000;
  std::vector<CheckpointRef> cps(n);
  for (std::size_t i = 0; i < n; ++i) cps[i].key = std::to_string(i);
  std::vector<double> hits(n, 0.0);
  for (std::uint64_t s = 0; s < seeds; ++s) {
    for (const auto& c : subsample_lineages(cps, fraction, derive_key(1234, s))) hits[std::stoul(c.key)] += 1;
  }
  const double p = 6.0 / n;
  const double mean = p * seeds;
  const double var = seeds * p * (1 - p);
  double chi2 = 0.0;
  for (double h : hits) {
    EXPECT_LT(std::abs(h - mean), 5 * std::sqrt(var));
    chi2 += (h - mean) * (h - mean) / var;
  }
  // Inclusion indicators sum to a constant, so chi2 has n-1 degrees of freedom.
  const double dof = n - 1;
  EXPECT_LT(std::abs(chi2 - dof), 5 * std::sqrt(2 * dof));
}

TEST(LineageStore, AppendReloadAndTornTail) {
  const auto dir = fresh_dir("store");
  {
    LineageStore store(dir);
    RunRecord a;
    a.run_key = "a";
    a.checkpoints.push_back({"a-e2", {{"short", 5, 2, 0, 9}}, 1.25, "checkpoints/a.clsc"});
    store.append(a);
    RunRecord b;
    b.run_key = "b";
    b.failed = true;
    b.failure = "boom";
    store.append(b);
    store.append(b);
    EXPECT_EQ(store.records().size(), 2u);
  }
  {
    std::ofstream out(dir / LineageStore::kFileName, std::ios::app);
    out << R"({"run": "c", "gro)";
  }
  LineageStore reloaded(dir);
  ASSERT_EQ(reloaded.records().size(), 2u);
  EXPECT_EQ(reloaded.find("a")->checkpoints.at(0).lineage.at(0).seed, 9u);
  EXPECT_TRUE(reloaded.find("b")->failed);
  EXPECT_FALSE(reloaded.find("c"));
  RunRecord c;
  c.run_key = "c";
  reloaded.append(c);
  EXPECT_EQ(LineageStore(dir).records().size(), 3u);

  // Damage before the tail is an error, not something to skip.
  auto text = read_text_file(dir / LineageStore::kFileName);
  text.insert(0, "{not json\n");
  write_text_file(dir / LineageStore::kFileName, text);
  EXPECT_THROW(LineageStore{dir}, FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Data, ValidationDisjointFromTraining) {
  const auto plan = smoke_plan();
  const auto data = toy_data(plan);
  std::set<std::vector<TokenId>> val_targets;
  std::set<std::pair<std::vector<TokenId>, std::vector<TokenId>>> val_pairs;
  std::size_t val_sets = 0;
  for (const auto& [key, set] : data.validation) {
    ++val_sets;
    EXPECT_EQ(set.size(), 10u);
    for (const auto& p : set) val_pairs.insert({p.source, p.target});
  }
  EXPECT_EQ(val_sets, 4u);  // short 20, short 40, medium 20, long 20
  for (const auto& pool : data.remainders) {
    for (const auto& p : pool.pairs) {
      const auto e = encode_pair(p, data.vocab);
      EXPECT_FALSE(val_pairs.contains({e.source, e.target}));
    }
  }
  for (const auto& p : data.cross.pairs) {
    const auto e = encode_pair(p, data.vocab);
    EXPECT_FALSE(val_pairs.contains({e.source, e.target}));
  }
}

TEST(RunPlan, FullGridShapeCardinalities) {
  auto plan = plan_from_json(nlohmann::json::parse(R"({
    "master_seed": 3, "carry_fraction": "1/6",
    "model": {"embed_dim": 2, "hidden_dim": 3},
    "trainer": {"batch_size": 8},
    "segments": [
      {"class": "short", "sizes": [4, 5, 6, 7, 8, 9], "seeds": 10, "checkpoints": [2, 4, 6], "val_size": 3},
      {"class": "medium", "sizes": [4, 5, 6, 7, 8, 9], "seeds": 1, "checkpoints": [2, 4, 6], "val_size": 3},
      {"class": "long", "sizes": [4], "seeds": 1, "checkpoints": [6], "val_size": 3}]})"));
  const auto data = toy_data(plan, 200);
  const auto dir = fresh_dir("full_grid_shape");
  const auto res = run_plan(plan, data, dir);
  ASSERT_EQ(res.segments.size(), 3u);
  EXPECT_EQ(res.segments[0].size(), 60u);
  EXPECT_EQ(all_checkpoints(res.segments[0]).size(), 180u);
  EXPECT_EQ(res.parents[1].size(), 18u);
  EXPECT_EQ(res.segments[1].size(), 108u);
  EXPECT_EQ(all_checkpoints(res.segments[1]).size(), 324u);
  EXPECT_EQ(res.parents[2].size(), 54u);
  EXPECT_EQ(res.segments[2].size(), 54u);
  // Every final checkpoint descends from a recorded medium checkpoint, which
  // descends from a first-segment winner.
  std::set<std::string> medium_keys, winner_keys;
  for (const auto& c : all_checkpoints(res.segments[1])) medium_keys.insert(c.key);
  for (const auto& c : res.parents[1]) winner_keys.insert(c.key);
  for (const auto& c : all_checkpoints(res.segments[2])) {
    ASSERT_EQ(c.lineage.size(), 3u);
    Lineage parent(c.lineage.begin(), c.lineage.end() - 1);
    Lineage root(c.lineage.begin(), c.lineage.begin() + 1);
    EXPECT_TRUE(medium_keys.contains(lineage_key(parent)));
    EXPECT_TRUE(winner_keys.contains(lineage_key(root)));
  }
  std::filesystem::remove_all(dir);
}

TEST(RunPlan, SmokeProducesReportAndTraceableCheckpoints) {
  const auto plan = smoke_plan();
  const auto data = toy_data(plan);
  const auto dir = fresh_dir("smoke");
  run_plan(plan, data, dir);
  const auto records = LineageStore(dir).records();
  const auto files = write_report(plan, records, dir);
  const auto t2 = read_text_file(files.table2);
  EXPECT_TRUE(t2.starts_with("Type,Val. Loss,Long TD,Med TD,Med Epochs,Short TD,Short Epochs,Checkpoint\n"));
  EXPECT_NE(t2.find("\nFresh,"), std::string::npos);
  EXPECT_NE(t2.find("\nMix,"), std::string::npos);
  EXPECT_NE(t2.find("\nCross,"), std::string::npos);
  EXPECT_TRUE(read_text_file(files.table1).starts_with("Short TD,Short Epochs,Val. Loss,Checkpoint\n"));

  // Every checkpoint re-evaluates to its recorded loss and carries its
  // lineage key.
  std::size_t checked = 0;
  for (const auto& r : records) {
    for (const auto& c : r.checkpoints) {
      const auto loaded = load_checkpoint(dir / c.file);
      EXPECT_EQ(loaded.key(), c.key);
      const auto cls = r.group == "segment" ? plan.segments[r.index].length_class : LengthClass::Long;
      const auto& val = data.val(cls, r.set_size);
      EXPECT_NEAR(evaluate(loaded.params, std::span<const EncodedPair>(val)), c.val_loss, 1e-9);
      ++checked;
    }
  }
  EXPECT_GT(checked, 20u);
  // Report cells resolve to stored checkpoints.
  std::set<std::string> keys;
  for (const auto& r : records) {
    for (const auto& c : r.checkpoints) keys.insert(c.key);
  }
  const auto result = collect_records(plan, records);
  for (const auto& row : table_type_comparison(plan, result).rows) {
    if (!row.back().empty()) {
      EXPECT_TRUE(keys.contains(row.back())) << row.back();
    }
  }
  std::filesystem::remove_all(dir);
}

TEST(RunPlan, RerunWorkersAndResumeAreBitIdentical) {
  const auto plan = smoke_plan();
  const auto data = toy_data(plan);
  const auto a = fresh_dir("det_a");
  const auto b = fresh_dir("det_b");
  const auto c = fresh_dir("det_c");
  run_plan(plan, data, a);
  write_report(plan, LineageStore(a).records(), a);
  run_plan(plan, data, b, {3, {}});
  write_report(plan, LineageStore(b).records(), b);

  // Interrupt after half the runs, then resume.
  std::size_t done = 0;
  RunOptions stop_half{1, [&](const std::string& line) {
                         if (line.starts_with("event=run_done") && ++done == 14) throw std::runtime_error("killed");
                       }};
  EXPECT_THROW(run_plan(plan, data, c, stop_half), std::runtime_error);
  EXPECT_EQ(LineageStore(c).records().size(), 14u);
  {
    std::ofstream torn(c / LineageStore::kFileName, std::ios::app);
    torn << "{\"run\": \"partial";
  }
  std::size_t resumed = 0;
  run_plan(plan, data, c, {1, [&](const std::string& line) { resumed += line.starts_with("event=run_done"); }});
  write_report(plan, LineageStore(c).records(), c);

  const auto fa = deterministic_files(a);
  EXPECT_GT(fa.size(), 20u);
  EXPECT_EQ(fa, deterministic_files(b));
  EXPECT_EQ(fa, deterministic_files(c));
  EXPECT_EQ(resumed + 14, LineageStore(a).records().size());

  // Another master seed changes the results.
  auto other = plan;
  other.master_seed = 8;
  const auto d = fresh_dir("det_d");
  run_plan(other, toy_data(other), d);
  write_report(other, LineageStore(d).records(), d);
  EXPECT_NE(fa, deterministic_files(d));
  for (const auto& dir : {a, b, c, d}) std::filesystem::remove_all(dir);
}

TEST(RunPlan, RefusesForeignOutDirAndSmallPools) {
  const auto plan = smoke_plan();
  const auto data = toy_data(plan);
  const auto dir = fresh_dir("foreign");
  auto first = plan;
  first.segments.pop_back();
  first.baselines.clear();
  run_plan(first, toy_data(first), dir);
  EXPECT_THROW(run_plan(plan, data, dir), ConfigError);

  auto big = plan;
  big.segments[0].set_sizes = {20, 1000000};
  const auto other = fresh_dir("too_big");
  EXPECT_THROW(run_plan(big, toy_data(big), other), InsufficientPairs);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(other);
}

TEST(Report, ShortEpochTableMatchesBruteForce) {
  auto plan = smoke_plan();
  plan.segments[0].set_sizes = {10, 20, 30};
  plan.segments[1].set_sizes = {5, 50};
  ExperimentResult r;
  r.segments.resize(3);
  KeyedRng rng(17);
  std::map<std::uint64_t, std::pair<double, int>> brute;
  for (std::uint64_t s : {10, 20}) {  // no medium run descends from size 30
    for (int se : {1, 2}) {
      for (std::uint64_t ms : {5, 50}) {
        RunRecord rec;
        rec.run_key = std::to_string(s) + "/" + std::to_string(se) + "/" + std::to_string(ms);
        for (int me : {1, 2}) {
          CheckpointRef c;
          c.lineage = {{"short", s, se, 0, 0}, {"medium", ms, me, 0, 0}};
          c.key = lineage_key(c.lineage);
          c.val_loss = 1.0 + rng.uniform01();
          if (ms == 50 && me == 2) {
            auto it = brute.find(s);
            if (it == brute.end() || c.val_loss < it->second.first) brute[s] = {c.val_loss, se};
          }
          rec.checkpoints.push_back(c);
        }
        r.segments[1].push_back(rec);
      }
    }
  }
  const auto t = table_short_epoch_analysis(plan, r);
  ASSERT_EQ(t.rows.size(), 3u);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto size = plan.segments[0].set_sizes[i];
    EXPECT_EQ(t.rows[i][0], std::to_string(size));
    EXPECT_EQ(t.rows[i][1], std::to_string(brute.at(size).second));
    EXPECT_EQ(std::stod(t.rows[i][2]), std::stod(detail::format_loss(brute.at(size).first)));
  }
  EXPECT_EQ(t.rows[2], (std::vector<std::string>{"30", "", "", ""}));
}

TEST(Report, EmptyRecordsGiveHeaderOnlyTables) {
  const auto plan = smoke_plan();
  const auto r = collect_records(plan, {});
  EXPECT_EQ(table_short_epoch_analysis(plan, r).rows.size(), 2u);  // gap rows
  const auto t2 = table_type_comparison(plan, r);
  EXPECT_EQ(t2.header.size(), 8u);
  for (const auto& row : t2.rows) EXPECT_EQ(row[1], "");
  EXPECT_TRUE(directional_comparison(plan, r).empty());
}

TEST(Report, WorstAndBestBlocksOrdered) {
  auto plan = smoke_plan();
  ExperimentResult r;
  r.segments.resize(3);
  RunRecord rec;
  rec.run_key = "x";
  for (int i = 0; i < 5; ++i) {
    CheckpointRef c;
    c.lineage = {{"short", 20, 1, 0, 0}, {"medium", 20, 2, 0, 0}, {"long", 20, 2, 0, static_cast<std::uint64_t>(i)}};
    c.key = "k" + std::to_string(i);
    c.val_loss = 3.0 + 0.1 * ((i * 3) % 5);
    rec.checkpoints.push_back(c);
  }
  r.segments[2].push_back(rec);
  const auto t = table_type_comparison(plan, r);
  ASSERT_GE(t.rows.size(), 6u);
  EXPECT_EQ(t.rows[0][0], "DT (worst)");
  EXPECT_EQ(t.rows[0][1], "3.400000");
  EXPECT_EQ(t.rows[2][1], "3.200000");
  EXPECT_EQ(t.rows[3][0], "DT (best)");
  EXPECT_EQ(t.rows[3][1], "3.000000");
  EXPECT_EQ(t.rows[5][1], "3.200000");
  EXPECT_EQ(t.rows[0][3], "20");  // Med TD
  EXPECT_EQ(t.rows[0][4], "2");   // Med Epochs
  EXPECT_EQ(t.rows[0][6], "1");   // Short Epochs
}

#pragma once

// One training segment: length-bucketed minibatches, clipped Adam steps,
// per-epoch validation and checkpoints at the configured epoch marks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "currseq/checkpoint.hpp"
#include "currseq/corpus.hpp"
#include "currseq/digest.hpp"
#include "currseq/model.hpp"
#include "currseq/optimizer.hpp"
#include "currseq/rng.hpp"
#include "currseq/vocab.hpp"

namespace currseq {

struct TrainConfig {
  std::size_t batch_size = 128;
  std::vector<int> epoch_checkpoints{2, 4, 6};
  std::uint64_t shuffle_seed = 0;
  bool early_stop = false;
  std::size_t bucket_window = 32;  // in batches
  AdamConfig adam{};
  double clip_norm = 5.0;
  bool reverse_source = false;
  std::size_t eval_batch_size = 256;

  int max_epochs() const { return epoch_checkpoints.empty() ? 0 : epoch_checkpoints.back(); }

  void validate() const {
    if (batch_size < 1) throw ConfigError("trainer.batch_size", "must be positive");
    if (bucket_window < 1) throw ConfigError("trainer.bucket_window", "must be positive");
    if (eval_batch_size < 1) throw ConfigError("trainer.eval_batch_size", "must be positive");
    if (!(adam.lr > 0.0)) throw ConfigError("trainer.learning_rate", "must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("trainer.clip_norm", "must be positive");
    for (std::size_t i = 0; i < epoch_checkpoints.size(); ++i) {
      if (epoch_checkpoints[i] < 1 || (i > 0 && epoch_checkpoints[i] <= epoch_checkpoints[i - 1])) {
        throw ConfigError("trainer.epoch_checkpoints", "must be positive and strictly ascending");
      }
    }
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"epoch_checkpoints", c.epoch_checkpoints},
          {"shuffle_seed", c.shuffle_seed},
          {"early_stop", c.early_stop},
          {"bucket_window", c.bucket_window},
          {"learning_rate", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},
          {"clip_norm", c.clip_norm},
          {"reverse_source", c.reverse_source},
          {"eval_batch_size", c.eval_batch_size}};
}

inline std::string config_digest(const ModelConfig& m, const TrainConfig& t) {
  nlohmann::json j{{"model", to_json(m)}, {"trainer", to_json(t)}};
  j["trainer"].erase("shuffle_seed");
  j["model"].erase("seed");
  return sha256_hex(j.dump());
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();  // NaN for epoch 0
  double val_loss = 0.0;
  double wall_seconds = 0.0;
};

struct Metrics {
  std::string lineage_key;
  std::vector<EpochRecord> epochs;
};

// One structured-text line per epoch. Wall time is omitted when
// `with_time` is false so digests stay reproducible.
inline std::string metrics_line(const std::string& key, const EpochRecord& r, bool with_time = true) {
  nlohmann::json j{{"lineage", key}, {"epoch", r.epoch}, {"val_loss", r.val_loss}};
  j["train_loss"] = std::isnan(r.train_loss) ? nlohmann::json(nullptr) : nlohmann::json(r.train_loss);
  if (with_time) j["wall_seconds"] = r.wall_seconds;
  return j.dump();
}

inline std::vector<EncodedPair> encode_pool(const PairPool& pool, const Vocabulary& v, bool reverse_source = false) {
  std::vector<EncodedPair> out;
  out.reserve(pool.size());
  for (const auto& p : pool.pairs) out.push_back(encode_pair(p, v, reverse_source));
  return out;
}

// Deterministic epoch permutation, then a stable sort by target length inside
// each window of bucket_window * batch_size pairs, then consecutive chunks.
// The final partial batch is kept.
inline std::vector<std::vector<std::size_t>> batch_indices(std::span<const EncodedPair> pairs, const TrainConfig& cfg,
                                                           int epoch) {
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  KeyedRng rng(derive_key(cfg.shuffle_seed, "epoch", epoch));
  shuffle_in_place(std::span<std::size_t>(order), rng);

  const std::size_t window = cfg.bucket_window * cfg.batch_size;
  for (std::size_t start = 0; start < order.size(); start += window) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(start);
    const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + window));
    std::stable_sort(first, last,
                     [&](std::size_t a, std::size_t b) { return pairs[a].target.size() < pairs[b].target.size(); });
  }

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const auto end = std::min(order.size(), start + cfg.batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

inline std::vector<Batch> make_batches(std::span<const EncodedPair> pairs, const TrainConfig& cfg, int epoch) {
  std::vector<Batch> out;
  std::vector<const EncodedPair*> rows;
  for (const auto& idx : batch_indices(pairs, cfg, epoch)) {
    rows.clear();
    for (auto i : idx) rows.push_back(&pairs[i]);
    out.push_back(make_batch(std::span<const EncodedPair* const>(rows)));
  }
  return out;
}

struct LossTotals {
  double nll = 0.0;
  std::size_t tokens = 0;
  double mean() const { return nll / static_cast<double>(tokens); }
};

// Total -ln p(gold) over every predicted target position of the pool,
// divided by the number of such positions. Runs the model in double.
template <typename Real>
LossTotals evaluate_totals(const Parameters<Real>& p, std::span<const EncodedPair> pool,
                           std::size_t batch_size = 256) {
  if (pool.empty()) throw EmptyValidationSet();
  const auto pd = p.template cast<double>();
  LossTotals totals;
  for (std::size_t start = 0; start < pool.size(); start += batch_size) {
    const auto chunk = pool.subspan(start, std::min(batch_size, pool.size() - start));
    const Batch b = make_batch(chunk);
    const auto res = forward_loss(pd, b);
    totals.nll += res.cache.loss_sum;
    totals.tokens += res.cache.predicted;
  }
  return totals;
}

template <typename Real>
double evaluate(const Parameters<Real>& p, std::span<const EncodedPair> pool, std::size_t batch_size = 256) {
  return evaluate_totals(p, pool, batch_size).mean();
}

template <typename Real>
double evaluate(const Parameters<Real>& p, const PairPool& pool, const Vocabulary& v, bool reverse_source = false) {
  if (pool.empty()) throw EmptyValidationSet();
  const auto encoded = encode_pool(pool, v, reverse_source);
  return evaluate(p, std::span<const EncodedPair>(encoded));
}

struct TrainResult {
  std::vector<Checkpoint> checkpoints;
  Metrics metrics;
  bool failed = false;
  bool stopped_early = false;
  std::string failure;
};

// Describes the stage being trained; `epochs` is filled in per checkpoint.
struct StageSpec {
  Lineage parent;
  StageRecord stage;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Runs max_epochs epochs from `init`, emitting a checkpoint (with its
// validation loss and extended lineage) at every configured epoch mark. A
// numerical failure ends the run with failed = true and no checkpoints.
inline TrainResult train_segment(const Parameters<float>& init, std::span<const EncodedPair> train,
                                 std::span<const EncodedPair> val, const ModelConfig& model, const TrainConfig& cfg,
                                 const StageSpec& spec, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (!init.matches(model)) throw ConfigError("model", "initial parameters do not match the model configuration");
  using Clock = std::chrono::steady_clock;

  TrainResult result;
  Lineage lineage = spec.parent;
  lineage.push_back(spec.stage);
  result.metrics.lineage_key = lineage_key(lineage);
  const std::string cfg_digest = config_digest(model, cfg);
  Sha256 metrics_hash;

  auto record = [&](const EpochRecord& r) {
    result.metrics.epochs.push_back(r);
    metrics_hash.update(metrics_line(result.metrics.lineage_key, r, false)).update("\n");
    if (on_epoch) on_epoch(r);
  };

  Parameters<float> params = init;
  try {
    const auto start = Clock::now();
    record({0, std::numeric_limits<double>::quiet_NaN(), evaluate(params, val, cfg.eval_batch_size),
            std::chrono::duration<double>(Clock::now() - start).count()});
    if (!cfg.epoch_checkpoints.empty() && train.empty()) throw InsufficientPairs(0, 1, "training");

    auto opt = OptimizerState<float>::fresh(params, cfg.adam);
    double prev_val = result.metrics.epochs.back().val_loss;
    std::size_t next_mark = 0;
    for (int epoch = 1; epoch <= cfg.max_epochs(); ++epoch) {
      const auto t0 = Clock::now();
      LossTotals train_totals;
      for (const auto& batch : make_batches(train, cfg, epoch)) {
        auto fwd = forward_loss(params, batch);
        auto grads = backward(params, fwd.cache);
        clip_global_norm(grads, cfg.clip_norm);
        adam_step(params, grads, opt);
        train_totals.nll += fwd.cache.loss_sum;
        train_totals.tokens += fwd.cache.predicted;
      }
      if (!params.all_finite()) throw NumericalError("non-finite parameters after epoch " + std::to_string(epoch));
      const double val_loss = evaluate(params, val, cfg.eval_batch_size);
      record({epoch, train_totals.mean(), val_loss, std::chrono::duration<double>(Clock::now() - t0).count()});

      if (next_mark < cfg.epoch_checkpoints.size() && cfg.epoch_checkpoints[next_mark] == epoch) {
        Checkpoint c;
        c.model = model;
        c.params = params;
        c.lineage = spec.parent;
        c.lineage.push_back(spec.stage);
        c.lineage.back().epochs = epoch;
        c.val_loss = val_loss;
        c.config_digest = cfg_digest;
        c.metrics_digest = Sha256(metrics_hash).hex();
        result.checkpoints.push_back(std::move(c));
        ++next_mark;
      }
      if (cfg.early_stop && val_loss > prev_val) {
        result.stopped_early = true;
        break;
      }
      prev_val = val_loss;
    }
  } catch (const NumericalError& e) {
    result.failed = true;
    result.failure = e.what();
    result.checkpoints.clear();
  }
  return result;
}

inline TrainResult train_segment(const Parameters<float>& init, const PairPool& train_pool, const PairPool& val_pool,
                                 const Vocabulary& v, const ModelConfig& model, const TrainConfig& cfg,
                                 const StageSpec& spec, const EpochCallback& on_epoch = {}) {
  const auto train = encode_pool(train_pool, v, cfg.reverse_source);
  const auto val = encode_pool(val_pool, v, cfg.reverse_source);
  return train_segment(init, train, val, model, cfg, spec, on_epoch);
}

}  // namespace currseq

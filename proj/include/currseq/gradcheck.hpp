#pragma once

// Central finite-difference check of the analytic gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "currseq/model.hpp"

namespace currseq {

// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
// gradient is essentially zero from dividing rounding noise by zero.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_slot;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed(double tolerance) const { return max_relative_error <= tolerance; }
};

using LossFn = std::function<double(const Parameters<double>&)>;

// Compares `analytic` against central differences of `loss` at `p`.
inline GradCheckResult compare_with_finite_differences(const Parameters<double>& p, const Gradients<double>& analytic,
                                                       const LossFn& loss, double step = 1e-4) {
  GradCheckResult res;
  Parameters<double> probe = p;
  for (std::size_t s = 0; s < kNumSlots; ++s) {
    auto& a = probe.arrays[s];
    for (Eigen::Index k = 0; k < a.size(); ++k) {
      const double saved = a.data()[k];
      a.data()[k] = saved + step;
      const double up = loss(probe);
      a.data()[k] = saved - step;
      const double down = loss(probe);
      a.data()[k] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double an = analytic.arrays[s].data()[k];
      const double err = relative_error(an, numeric);
      ++res.coordinates;
      if (res.coordinates == 1 || err > res.max_relative_error) {
        res.max_relative_error = err;
        res.worst_slot = std::string(kSlotNames[s]);
        res.worst_index = static_cast<std::size_t>(k);
        res.worst_analytic = an;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

struct GradCheckOptions {
  ModelConfig model{20, 8, 12, 0.08, 7};
  double step = 1e-4;
  // Fault injection for testing the checker itself: adds this amount to one
  // analytic gradient coordinate before comparison.
  double corrupt = 0.0;
};

// The default fixture: three pairs whose targets hold at most five ids.
inline std::vector<EncodedPair> gradcheck_pairs(std::size_t vocab_size) {
  auto id = [&](int k) { return static_cast<TokenId>(kReservedTokens + static_cast<std::size_t>(k) % (vocab_size - kReservedTokens)); };
  return {
      {{id(0), id(5), id(3)}, {kSos, id(1), id(2), id(4), kEos}},
      {{id(7)}, {kSos, id(6), kEos}},
      {{id(2), id(9), id(11), id(4), id(1)}, {kSos, id(3), id(8), kEos}},
  };
}

inline GradCheckResult run_gradcheck(const GradCheckOptions& opt = {}) {
  const auto p = init_params<double>(opt.model);
  const auto pairs = gradcheck_pairs(opt.model.vocab_size);
  const Batch batch = make_batch(std::span<const EncodedPair>(pairs));
  auto fwd = forward_loss(p, batch);
  auto g = backward(p, fwd.cache);
  if (opt.corrupt != 0.0) g[kDecoderRecurrent](0, 0) += opt.corrupt;
  return compare_with_finite_differences(
      p, g, [&](const Parameters<double>& q) { return forward_loss(q, batch).loss; }, opt.step);
}

}  // namespace currseq

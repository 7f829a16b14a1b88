#pragma once

#include <cmath>
#include <cstdint>

#include "currseq/model.hpp"

namespace currseq {

// Global L2 norm over every array, accumulated in double.
template <typename Real>
double global_norm(const Gradients<Real>& g) {
  double sq = 0.0;
  for (const auto& a : g.arrays) {
    for (Eigen::Index k = 0; k < a.size(); ++k) {
      const double v = static_cast<double>(a.data()[k]);
      sq += v * v;
    }
  }
  return std::sqrt(sq);
}

// Rescales g in place so its global norm is at most max_norm. Returns the
// norm before clipping.
template <typename Real>
double clip_global_norm(Gradients<Real>& g, double max_norm) {
  const double norm = global_norm(g);
  if (norm > max_norm && norm > 0.0) {
    const Real factor = static_cast<Real>(max_norm / norm);
    for (auto& a : g.arrays) a *= factor;
  }
  return norm;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

template <typename Real>
struct OptimizerState {
  Parameters<Real> m;
  Parameters<Real> v;
  std::uint64_t t = 0;
  AdamConfig hp;

  static OptimizerState fresh(const Parameters<Real>& like, AdamConfig hp = {}) {
    OptimizerState s;
    for (std::size_t k = 0; k < kNumSlots; ++k) {
      s.m.arrays[k] = Matrix<Real>::Zero(like.arrays[k].rows(), like.arrays[k].cols());
      s.v.arrays[k] = Matrix<Real>::Zero(like.arrays[k].rows(), like.arrays[k].cols());
    }
    s.hp = hp;
    return s;
  }
};

// Bias-corrected adaptive-moment update.
template <typename Real>
void adam_step(Parameters<Real>& p, const Gradients<Real>& g, OptimizerState<Real>& s) {
  ++s.t;
  const auto b1 = static_cast<Real>(s.hp.beta1);
  const auto b2 = static_cast<Real>(s.hp.beta2);
  const auto c1 = static_cast<Real>(1.0 / (1.0 - std::pow(s.hp.beta1, static_cast<double>(s.t))));
  const auto c2 = static_cast<Real>(1.0 / (1.0 - std::pow(s.hp.beta2, static_cast<double>(s.t))));
  const auto lr = static_cast<Real>(s.hp.lr);
  const auto eps = static_cast<Real>(s.hp.eps);
  for (std::size_t k = 0; k < kNumSlots; ++k) {
    auto m = s.m.arrays[k].array();
    auto v = s.v.arrays[k].array();
    const auto gk = g.arrays[k].array();
    m = b1 * m + (Real(1) - b1) * gk;
    v = b2 * v + (Real(1) - b2) * gk * gk;
    p.arrays[k].array() -= lr * (m * c1) / ((v * c2).sqrt() + eps);
  }
}

}  // namespace currseq

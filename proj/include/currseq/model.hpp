#pragma once

// Single-layer LSTM encoder-decoder for next-utterance prediction. The
// encoder's final (hidden, cell) state seeds the decoder, which is
// teacher-forced over the target and scored by masked per-token
// cross-entropy. Gradients are hand-derived backpropagation through time.
//
// Everything is templated on the scalar type: float for training, double
// for gradient checking and evaluation.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "currseq/errors.hpp"
#include "currseq/rng.hpp"
#include "currseq/vocab.hpp"

namespace currseq {

struct ModelConfig {
  std::size_t vocab_size = 4000;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 128;
  double init_scale = 0.08;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size < kReservedTokens) throw ConfigError("model.vocab_size", "must be at least 4");
    if (embed_dim < 1) throw ConfigError("model.embed_dim", "must be positive");
    if (hidden_dim < 1) throw ConfigError("model.hidden_dim", "must be positive");
    if (!(init_scale > 0.0)) throw ConfigError("model.init_scale", "must be positive");
  }

  // 2Vd + 2(4h(d+h) + 4h) + hV + V
  std::size_t parameter_count() const noexcept {
    const std::size_t V = vocab_size, d = embed_dim, h = hidden_dim;
    return 2 * V * d + 2 * (4 * h * (d + h) + 4 * h) + h * V + V;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum ParamSlot : std::size_t {
  kEncoderEmbedding,
  kDecoderEmbedding,
  kEncoderInput,
  kEncoderRecurrent,
  kEncoderBias,
  kDecoderInput,
  kDecoderRecurrent,
  kDecoderBias,
  kOutputWeight,
  kOutputBias,
  kNumSlots
};

inline constexpr std::array<std::string_view, kNumSlots> kSlotNames = {
    "encoder.embedding",   "decoder.embedding",   "encoder.lstm.input", "encoder.lstm.recurrent",
    "encoder.lstm.bias",   "decoder.lstm.input",  "decoder.lstm.recurrent",
    "decoder.lstm.bias",   "output.weight",       "output.bias"};

// (rows, cols) of every slot for a configuration.
inline std::array<std::pair<std::size_t, std::size_t>, kNumSlots> slot_shapes(const ModelConfig& cfg) {
  const std::size_t V = cfg.vocab_size, d = cfg.embed_dim, h = cfg.hidden_dim;
  return {{{V, d}, {V, d}, {d, 4 * h}, {h, 4 * h}, {1, 4 * h}, {d, 4 * h}, {h, 4 * h}, {1, 4 * h}, {h, V}, {1, V}}};
}

// All model weights, in declared slot order. Gradients share this type.
template <typename Real>
struct Parameters {
  std::array<Matrix<Real>, kNumSlots> arrays;

  static Parameters zeros(const ModelConfig& cfg) {
    Parameters p;
    const auto shapes = slot_shapes(cfg);
    for (std::size_t s = 0; s < kNumSlots; ++s) {
      p.arrays[s] = Matrix<Real>::Zero(static_cast<Eigen::Index>(shapes[s].first),
                                       static_cast<Eigen::Index>(shapes[s].second));
    }
    return p;
  }

  Matrix<Real>& operator[](ParamSlot s) { return arrays[s]; }
  const Matrix<Real>& operator[](ParamSlot s) const { return arrays[s]; }

  std::size_t vocab_size() const { return static_cast<std::size_t>(arrays[kEncoderEmbedding].rows()); }
  std::size_t embed_dim() const { return static_cast<std::size_t>(arrays[kEncoderEmbedding].cols()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(arrays[kEncoderRecurrent].rows()); }

  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (const auto& a : arrays) n += static_cast<std::size_t>(a.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& a : arrays) {
      if (!a.allFinite()) return false;
    }
    return true;
  }

  bool matches(const ModelConfig& cfg) const {
    const auto shapes = slot_shapes(cfg);
    for (std::size_t s = 0; s < kNumSlots; ++s) {
      if (static_cast<std::size_t>(arrays[s].rows()) != shapes[s].first ||
          static_cast<std::size_t>(arrays[s].cols()) != shapes[s].second) {
        return false;
      }
    }
    return true;
  }

  template <typename To>
  Parameters<To> cast() const {
    Parameters<To> out;
    for (std::size_t s = 0; s < kNumSlots; ++s) out.arrays[s] = arrays[s].template cast<To>();
    return out;
  }

  void set_zero() {
    for (auto& a : arrays) a.setZero();
  }

  friend bool operator==(const Parameters& a, const Parameters& b) {
    for (std::size_t s = 0; s < kNumSlots; ++s) {
      if (a.arrays[s].rows() != b.arrays[s].rows() || a.arrays[s].cols() != b.arrays[s].cols() ||
          a.arrays[s] != b.arrays[s]) {
        return false;
      }
    }
    return true;
  }
};

template <typename Real>
using Gradients = Parameters<Real>;

// Entries i.i.d. uniform on [-init_scale, init_scale], entry k of slot s
// drawn from stream (seed, s) at position k.
template <typename Real>
Parameters<Real> init_params(const ModelConfig& cfg) {
  cfg.validate();
  auto p = Parameters<Real>::zeros(cfg);
  for (std::size_t s = 0; s < kNumSlots; ++s) {
    const std::uint64_t key = derive_key(cfg.seed, "init", s);
    auto& a = p.arrays[s];
    for (Eigen::Index k = 0; k < a.size(); ++k) {
      const double u = static_cast<double>(stream_at(key, static_cast<std::uint64_t>(k)) >> 11) * 0x1.0p-53;
      a.data()[k] = static_cast<Real>(cfg.init_scale * (2.0 * u - 1.0));
    }
  }
  return p;
}

// One training example as token ids: source without markers, target
// wrapped in SOS ... EOS.
struct EncodedPair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
};

inline EncodedPair encode_pair(const DialoguePair& p, const Vocabulary& v, bool reverse_source = false) {
  return {encode_source(p.source, v, reverse_source), encode_target(p.target, v)};
}

inline constexpr std::size_t kMaxTargetIds = kLongMaxWords + 2;

// Right-padded id matrices for one minibatch. `mask` marks the positions
// (row, t) for t in [0, T-1) whose next token target[row][t+1] is scored.
struct Batch {
  std::size_t rows = 0;
  std::size_t source_len = 0;  // S
  std::size_t target_len = 0;  // T
  std::vector<TokenId> source;  // rows x S
  std::vector<TokenId> target;  // rows x T
  std::vector<std::uint8_t> mask;  // rows x (T-1)
  std::vector<std::size_t> source_lengths;
  std::vector<std::size_t> target_lengths;

  TokenId source_at(std::size_t r, std::size_t t) const { return source[r * source_len + t]; }
  TokenId target_at(std::size_t r, std::size_t t) const { return target[r * target_len + t]; }
  bool masked(std::size_t r, std::size_t t) const { return mask[r * (target_len - 1) + t] != 0; }

  std::size_t predicted_tokens() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return n;
  }
};

inline Batch make_batch(std::span<const EncodedPair* const> pairs) {
  Batch b;
  b.rows = pairs.size();
  for (const auto* p : pairs) {
    if (p->source.empty()) throw InvalidBatch("empty source sequence");
    if (p->target.size() < 2) throw InvalidBatch("target must hold at least SOS and EOS");
    if (p->target.size() > kMaxTargetIds) throw InvalidBatch("target longer than 16 words");
    b.source_len = std::max(b.source_len, p->source.size());
    b.target_len = std::max(b.target_len, p->target.size());
  }
  b.source.assign(b.rows * b.source_len, kPad);
  b.target.assign(b.rows * b.target_len, kPad);
  b.mask.assign(b.rows * (b.target_len ? b.target_len - 1 : 0), 0);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto& p = *pairs[r];
    std::copy(p.source.begin(), p.source.end(), b.source.begin() + static_cast<std::ptrdiff_t>(r * b.source_len));
    std::copy(p.target.begin(), p.target.end(), b.target.begin() + static_cast<std::ptrdiff_t>(r * b.target_len));
    for (std::size_t t = 0; t + 1 < p.target.size(); ++t) b.mask[r * (b.target_len - 1) + t] = 1;
    b.source_lengths.push_back(p.source.size());
    b.target_lengths.push_back(p.target.size());
  }
  return b;
}

inline Batch make_batch(std::span<const EncodedPair> pairs) {
  std::vector<const EncodedPair*> ptrs;
  ptrs.reserve(pairs.size());
  for (const auto& p : pairs) ptrs.push_back(&p);
  return make_batch(std::span<const EncodedPair* const>(ptrs));
}

namespace detail {

template <typename Real>
struct LstmStep {
  Matrix<Real> x;       // B x d, embedded inputs
  Matrix<Real> gates;   // B x 4h, activated [i | f | g | o]
  Matrix<Real> c;       // B x h
  Matrix<Real> tanh_c;  // B x h
  Matrix<Real> h;       // B x h
  std::vector<std::uint8_t> active;  // encoder rows still inside their source
};

template <typename Real>
void gather_rows(const Matrix<Real>& table, std::span<const TokenId> ids, Matrix<Real>& out) {
  out.resize(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = table.row(ids[r]);
}

// Forward through one LSTM cell for all rows. Rows with active[r] == 0 carry
// their previous state unchanged.
template <typename Real>
void lstm_forward(const Matrix<Real>& w_in, const Matrix<Real>& w_rec, const Matrix<Real>& bias,
                  const Matrix<Real>& h_prev, const Matrix<Real>& c_prev, LstmStep<Real>& s) {
  const Eigen::Index H = w_rec.rows();
  s.gates.noalias() = s.x * w_in;
  s.gates.noalias() += h_prev * w_rec;
  s.gates.rowwise() += bias.row(0);
  auto sig = [](auto block) { block = (Real(1) + (-block.array()).exp()).inverse().matrix(); };
  sig(s.gates.leftCols(2 * H));
  s.gates.middleCols(2 * H, H) = s.gates.middleCols(2 * H, H).array().tanh().matrix();
  sig(s.gates.rightCols(H));
  s.c = (s.gates.middleCols(H, H).array() * c_prev.array() +
         s.gates.leftCols(H).array() * s.gates.middleCols(2 * H, H).array())
            .matrix();
  s.tanh_c = s.c.array().tanh().matrix();
  s.h = (s.gates.rightCols(H).array() * s.tanh_c.array()).matrix();
  if (!s.active.empty()) {
    for (Eigen::Index r = 0; r < s.h.rows(); ++r) {
      if (!s.active[static_cast<std::size_t>(r)]) {
        s.c.row(r) = c_prev.row(r);
        s.h.row(r) = h_prev.row(r);
      }
    }
  }
}

// Given dL/dh and dL/dc at the output of a step, produces dL/dz (pre-
// activation gates) and overwrites dh, dc with the gradients w.r.t. the
// previous state.
template <typename Real>
void lstm_backward(const Matrix<Real>& w_rec, const Matrix<Real>& c_prev, const LstmStep<Real>& s,
                   Matrix<Real>& dh, Matrix<Real>& dc, Matrix<Real>& dz) {
  const Eigen::Index H = w_rec.rows();
  const auto i = s.gates.leftCols(H).array();
  const auto f = s.gates.middleCols(H, H).array();
  const auto g = s.gates.middleCols(2 * H, H).array();
  const auto o = s.gates.rightCols(H).array();
  const auto tc = s.tanh_c.array();

  Matrix<Real> dc_total = (dc.array() + dh.array() * o * (Real(1) - tc * tc)).matrix();
  dz.resize(dh.rows(), 4 * H);
  dz.leftCols(H) = (dc_total.array() * g * i * (Real(1) - i)).matrix();
  dz.middleCols(H, H) = (dc_total.array() * c_prev.array() * f * (Real(1) - f)).matrix();
  dz.middleCols(2 * H, H) = (dc_total.array() * i * (Real(1) - g * g)).matrix();
  dz.rightCols(H) = (dh.array() * tc * o * (Real(1) - o)).matrix();
  Matrix<Real> dc_prev = (dc_total.array() * f).matrix();

  if (!s.active.empty()) {
    for (Eigen::Index r = 0; r < dz.rows(); ++r) {
      if (!s.active[static_cast<std::size_t>(r)]) {
        dz.row(r).setZero();
        dc_prev.row(r) = dc.row(r);
      }
    }
  }
  Matrix<Real> dh_prev = dz * w_rec.transpose();
  if (!s.active.empty()) {
    for (Eigen::Index r = 0; r < dz.rows(); ++r) {
      if (!s.active[static_cast<std::size_t>(r)]) dh_prev.row(r) = dh.row(r);
    }
  }
  dh = std::move(dh_prev);
  dc = std::move(dc_prev);
}

}  // namespace detail

// Activations kept by forward_loss for backward().
template <typename Real>
struct ForwardCache {
  const Batch* batch = nullptr;
  std::vector<detail::LstmStep<Real>> encoder;
  std::vector<detail::LstmStep<Real>> decoder;
  Matrix<Real> decoder_h;  // (T-1)*B x h, step-major
  Matrix<Real> probs;      // (T-1)*B x V
  std::size_t predicted = 0;
  double loss_sum = 0.0;  // sum of -ln p(gold) over masked positions
};

template <typename Real>
struct LossResult {
  double loss = 0.0;  // per-token mean
  ForwardCache<Real> cache;
};

// Masked mean next-token cross-entropy (natural log). The batch must outlive
// the returned cache.
template <typename Real>
LossResult<Real> forward_loss(const Parameters<Real>& p, const Batch& b) {
  if (b.rows == 0 || b.target_len < 2) throw InvalidBatch("batch has no predicted tokens");
  const std::size_t predicted = b.predicted_tokens();
  if (predicted == 0) throw InvalidBatch("batch has no predicted tokens");
  for (auto id : b.source) {
    if (id < 0 || static_cast<std::size_t>(id) >= p.vocab_size()) throw UnknownId(id);
  }
  for (auto id : b.target) {
    if (id < 0 || static_cast<std::size_t>(id) >= p.vocab_size()) throw UnknownId(id);
  }

  const auto B = static_cast<Eigen::Index>(b.rows);
  const auto H = static_cast<Eigen::Index>(p.hidden_dim());
  const auto V = static_cast<Eigen::Index>(p.vocab_size());
  const std::size_t steps = b.target_len - 1;

  LossResult<Real> out;
  auto& cache = out.cache;
  cache.batch = &b;
  cache.predicted = predicted;

  Matrix<Real> h = Matrix<Real>::Zero(B, H);
  Matrix<Real> c = Matrix<Real>::Zero(B, H);
  std::vector<TokenId> ids(b.rows);

  cache.encoder.resize(b.source_len);
  for (std::size_t t = 0; t < b.source_len; ++t) {
    auto& s = cache.encoder[t];
    s.active.assign(b.rows, 0);
    bool any_inactive = false;
    for (std::size_t r = 0; r < b.rows; ++r) {
      ids[r] = b.source_at(r, t);
      s.active[r] = t < b.source_lengths[r] ? 1 : 0;
      any_inactive |= !s.active[r];
    }
    if (!any_inactive) s.active.clear();
    detail::gather_rows(p[kEncoderEmbedding], ids, s.x);
    detail::lstm_forward(p[kEncoderInput], p[kEncoderRecurrent], p[kEncoderBias], h, c, s);
    h = s.h;
    c = s.c;
  }

  cache.decoder.resize(steps);
  cache.decoder_h.resize(static_cast<Eigen::Index>(steps) * B, H);
  for (std::size_t t = 0; t < steps; ++t) {
    auto& s = cache.decoder[t];
    for (std::size_t r = 0; r < b.rows; ++r) ids[r] = b.target_at(r, t);
    detail::gather_rows(p[kDecoderEmbedding], ids, s.x);
    detail::lstm_forward(p[kDecoderInput], p[kDecoderRecurrent], p[kDecoderBias], h, c, s);
    h = s.h;
    c = s.c;
    cache.decoder_h.middleRows(static_cast<Eigen::Index>(t) * B, B) = s.h;
  }

  cache.probs.noalias() = cache.decoder_h * p[kOutputWeight];
  cache.probs.rowwise() += p[kOutputBias].row(0);
  double loss_sum = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t r = 0; r < b.rows; ++r) {
      auto row = cache.probs.row(static_cast<Eigen::Index>(t) * B + static_cast<Eigen::Index>(r));
      const Real mx = row.maxCoeff();
      const Real lse = mx + std::log((row.array() - mx).exp().sum());
      if (b.masked(r, t)) loss_sum -= static_cast<double>(row(b.target_at(r, t + 1)) - lse);
      row = (row.array() - lse).exp().matrix();
    }
  }
  (void)V;
  cache.loss_sum = loss_sum;
  out.loss = loss_sum / static_cast<double>(predicted);
  if (!std::isfinite(out.loss)) throw NumericalError("non-finite loss in forward pass");
  return out;
}

// Exact gradient of the masked mean loss w.r.t. every parameter.
template <typename Real>
Gradients<Real> backward(const Parameters<Real>& p, const ForwardCache<Real>& cache) {
  const Batch& b = *cache.batch;
  const auto B = static_cast<Eigen::Index>(b.rows);
  const auto H = static_cast<Eigen::Index>(p.hidden_dim());
  const std::size_t steps = b.target_len - 1;
  const Real scale = Real(1) / static_cast<Real>(cache.predicted);

  Gradients<Real> g;
  for (std::size_t s = 0; s < kNumSlots; ++s) g.arrays[s] = Matrix<Real>::Zero(p.arrays[s].rows(), p.arrays[s].cols());

  // dL/dlogits = (softmax - onehot) / count on masked positions, 0 elsewhere.
  Matrix<Real> dlogits = cache.probs;
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t r = 0; r < b.rows; ++r) {
      const Eigen::Index row = static_cast<Eigen::Index>(t) * B + static_cast<Eigen::Index>(r);
      if (b.masked(r, t)) {
        dlogits(row, b.target_at(r, t + 1)) -= Real(1);
        dlogits.row(row) *= scale;
      } else {
        dlogits.row(row).setZero();
      }
    }
  }
  g[kOutputWeight].noalias() = cache.decoder_h.transpose() * dlogits;
  g[kOutputBias] = dlogits.colwise().sum();
  const Matrix<Real> dh_out = dlogits * p[kOutputWeight].transpose();

  Matrix<Real> dh = Matrix<Real>::Zero(B, H);
  Matrix<Real> dc = Matrix<Real>::Zero(B, H);
  Matrix<Real> dz;
  const Matrix<Real> zeros = Matrix<Real>::Zero(B, H);

  auto state_before = [&](bool decoder, std::size_t t) -> const detail::LstmStep<Real>* {
    if (decoder) {
      if (t > 0) return &cache.decoder[t - 1];
      return cache.encoder.empty() ? nullptr : &cache.encoder.back();
    }
    return t > 0 ? &cache.encoder[t - 1] : nullptr;
  };

  auto accumulate = [&](bool decoder, std::size_t t) {
    const auto& s = decoder ? cache.decoder[t] : cache.encoder[t];
    const auto* prev = state_before(decoder, t);
    const Matrix<Real>& h_prev = prev ? prev->h : zeros;
    const Matrix<Real>& c_prev = prev ? prev->c : zeros;
    const ParamSlot emb = decoder ? kDecoderEmbedding : kEncoderEmbedding;
    const ParamSlot w_in = decoder ? kDecoderInput : kEncoderInput;
    const ParamSlot w_rec = decoder ? kDecoderRecurrent : kEncoderRecurrent;
    const ParamSlot bias = decoder ? kDecoderBias : kEncoderBias;

    detail::lstm_backward(p[w_rec], c_prev, s, dh, dc, dz);
    g[w_in].noalias() += s.x.transpose() * dz;
    g[w_rec].noalias() += h_prev.transpose() * dz;
    g[bias] += dz.colwise().sum();
    const Matrix<Real> dx = dz * p[w_in].transpose();
    for (std::size_t r = 0; r < b.rows; ++r) {
      if (!s.active.empty() && !s.active[r]) continue;
      const TokenId id = decoder ? b.target_at(r, t) : b.source_at(r, t);
      g[emb].row(id) += dx.row(static_cast<Eigen::Index>(r));
    }
  };

  for (std::size_t t = steps; t-- > 0;) {
    dh += dh_out.middleRows(static_cast<Eigen::Index>(t) * B, B);
    accumulate(true, t);
  }
  for (std::size_t t = b.source_len; t-- > 0;) accumulate(false, t);

  if (!g.all_finite()) throw NumericalError("non-finite gradient");
  return g;
}

// Greedy next-utterance decoding: feeds SOS, emits the arg-max token (lowest
// id on ties) until EOS or max_len tokens. EOS, when produced, is included.
template <typename Real>
std::vector<TokenId> greedy_decode(const Parameters<Real>& p, std::span<const TokenId> source,
                                   std::size_t max_len = kMaxTargetIds) {
  const auto H = static_cast<Eigen::Index>(p.hidden_dim());
  Matrix<Real> h = Matrix<Real>::Zero(1, H);
  Matrix<Real> c = Matrix<Real>::Zero(1, H);
  detail::LstmStep<Real> s;
  for (TokenId id : source) {
    if (id < 0 || static_cast<std::size_t>(id) >= p.vocab_size()) throw UnknownId(id);
    detail::gather_rows(p[kEncoderEmbedding], std::span<const TokenId>(&id, 1), s.x);
    detail::lstm_forward(p[kEncoderInput], p[kEncoderRecurrent], p[kEncoderBias], h, c, s);
    h = s.h;
    c = s.c;
  }
  std::vector<TokenId> out;
  TokenId prev = kSos;
  while (out.size() < max_len) {
    detail::gather_rows(p[kDecoderEmbedding], std::span<const TokenId>(&prev, 1), s.x);
    detail::lstm_forward(p[kDecoderInput], p[kDecoderRecurrent], p[kDecoderBias], h, c, s);
    h = s.h;
    c = s.c;
    const Matrix<Real> logits = s.h * p[kOutputWeight] + p[kOutputBias];
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < logits.cols(); ++k) {
      if (logits(0, k) > logits(0, best)) best = k;
    }
    prev = static_cast<TokenId>(best);
    out.push_back(prev);
    if (prev == kEos) break;
  }
  return out;
}

}  // namespace currseq

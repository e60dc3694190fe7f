#pragma once

// Attention kernels. Each mechanism exists in an efficient form (sequential
// scan or chunked scan) and, where it matters, a materialized O(N^2) form used
// to check it. Inputs are per-head matrices with one row per position:
// q, k: N x d_k, v: N x d_v, decay: N x d_k.

#include "lasad/common.hpp"
#include "lasad/functions.hpp"
#include "lasad/spatial_decay.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace lasad::attention {

enum class FeatureMap { identity, elu_plus_one, silu };
enum class Normalization { delta, rms };

/// Upper bound on N accepted by materialized_decay_oracle().
inline constexpr Index kOracleMaxLength = 256;

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

template <typename A, typename B>
void require_same_rows(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b,
                       const char* what) {
  require(a.rows() == b.rows(), std::string(what) + ": row counts differ " + shape_string(a) +
                                    " vs " + shape_string(b));
}

template <typename A, typename B>
void require_same_shape(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b,
                        const char* what) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(what) + ": shapes differ " + shape_string(a) + " vs " + shape_string(b));
}

template <typename Q, typename K, typename V>
void check_qkv(const Eigen::MatrixBase<Q>& q, const Eigen::MatrixBase<K>& k,
               const Eigen::MatrixBase<V>& v, const char* what) {
  if (q.rows() < 1) throw DimensionError(std::string(what) + ": empty sequence");
  require_same_shape(q, k, what);
  require_same_rows(q, v, what);
}

/// Decay entries must lie in (0, 1] (or [0, 1] when allow_zero).
template <typename D>
void require_decay_range(const Eigen::MatrixBase<D>& decay, bool allow_zero, const char* what) {
  using Scalar = typename D::Scalar;
  for (Index i = 0; i < decay.rows(); ++i) {
    for (Index j = 0; j < decay.cols(); ++j) {
      const Scalar x = decay(i, j);
      const bool ok = (allow_zero ? x >= Scalar(0) : x > Scalar(0)) && x <= Scalar(1);
      if (!ok) {
        throw ContractError(std::string(what) + ": decay " + std::to_string(double(x)) +
                            " at (" + std::to_string(i) + "," + std::to_string(j) +
                            ") outside " + (allow_zero ? "[0, 1]" : "(0, 1]"));
      }
    }
  }
}

template <typename D>
MatrixX<typename D::Scalar> feature_map(const Eigen::MatrixBase<D>& x, FeatureMap phi) {
  using Scalar = typename D::Scalar;
  switch (phi) {
    case FeatureMap::identity:
      return x;
    case FeatureMap::elu_plus_one:
      return x.unaryExpr([](Scalar a) { return fn::elu_plus_one(a); });
    case FeatureMap::silu:
      return x.unaryExpr([](Scalar a) { return fn::silu(a); });
  }
  return x;
}

template <typename D>
MatrixX<typename D::Scalar> rms_rows(const Eigen::MatrixBase<D>& x, typename D::Scalar eps) {
  using Scalar = typename D::Scalar;
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar ms = x.row(i).squaredNorm() / Scalar(x.cols());
    const Scalar denom = std::sqrt(ms + eps);
    if (!(denom > Scalar(0))) throw NumericError("rms normalization of an all-zero row with eps=0");
    out.row(i) = x.row(i) / denom;
  }
  return out;
}

/// Sequential decay scan without range checks:
///   s_t = diag(decay_t) s_{t-1} + k_t^T v_t,  o_t = q_t s_t.
/// When `states` is non-null it receives s_1..s_N (for backward).
template <typename Q, typename K, typename V, typename D>
MatrixX<typename Q::Scalar> decay_scan(const Eigen::MatrixBase<Q>& q, const Eigen::MatrixBase<K>& k,
                                       const Eigen::MatrixBase<V>& v, const Eigen::MatrixBase<D>& decay,
                                       std::vector<MatrixX<typename Q::Scalar>>* states = nullptr) {
  using Scalar = typename Q::Scalar;
  const Index n = q.rows();
  MatrixX<Scalar> s = MatrixX<Scalar>::Zero(k.cols(), v.cols());
  MatrixX<Scalar> out(n, v.cols());
  if (states != nullptr) states->assign(std::size_t(n), MatrixX<Scalar>());
  for (Index t = 0; t < n; ++t) {
    s.array().colwise() *= decay.row(t).transpose().array();
    s.noalias() += k.row(t).transpose() * v.row(t);
    out.row(t).noalias() = q.row(t) * s;
    if (states != nullptr) (*states)[std::size_t(t)] = s;
  }
  return out;
}

/// Reverse pass of decay_scan given the stored states and dL/dO.
template <typename Scalar>
struct DecayScanGrads {
  MatrixX<Scalar> dq, dk, dv, ddecay;
};

template <typename Q, typename K, typename V, typename D, typename G>
DecayScanGrads<typename Q::Scalar> decay_scan_backward(
    const Eigen::MatrixBase<Q>& q, const Eigen::MatrixBase<K>& k, const Eigen::MatrixBase<V>& v,
    const Eigen::MatrixBase<D>& decay, const std::vector<MatrixX<typename Q::Scalar>>& states,
    const Eigen::MatrixBase<G>& grad_out) {
  using Scalar = typename Q::Scalar;
  const Index n = q.rows();
  DecayScanGrads<Scalar> g{MatrixX<Scalar>(n, q.cols()), MatrixX<Scalar>(n, k.cols()),
                           MatrixX<Scalar>(n, v.cols()), MatrixX<Scalar>(n, decay.cols())};
  // carry = dL/ds_t accumulated from steps >= t.
  MatrixX<Scalar> carry = MatrixX<Scalar>::Zero(k.cols(), v.cols());
  for (Index t = n - 1; t >= 0; --t) {
    const MatrixX<Scalar>& s = states[std::size_t(t)];
    carry.noalias() += q.row(t).transpose() * grad_out.row(t);
    g.dq.row(t).noalias() = grad_out.row(t) * s.transpose();
    g.dk.row(t).noalias() = v.row(t) * carry.transpose();
    g.dv.row(t).noalias() = k.row(t) * carry;
    if (t > 0) {
      g.ddecay.row(t) = (carry.array() * states[std::size_t(t - 1)].array()).rowwise().sum().transpose();
    } else {
      g.ddecay.row(t).setZero();
    }
    carry.array().colwise() *= decay.row(t).transpose().array();
  }
  return g;
}

/// Chunked evaluation of decay_scan. Within a chunk the pairwise decay
/// products are built by running products, so zero decays are handled.
template <typename Q, typename K, typename V, typename D>
MatrixX<typename Q::Scalar> decay_scan_chunked(const Eigen::MatrixBase<Q>& q,
                                               const Eigen::MatrixBase<K>& k,
                                               const Eigen::MatrixBase<V>& v,
                                               const Eigen::MatrixBase<D>& decay, Index chunk) {
  using Scalar = typename Q::Scalar;
  if (chunk < 1) throw ConfigError("chunk size must be >= 1, got " + std::to_string(chunk));
  const Index n = q.rows();
  const Index dk = k.cols();
  const Index dv = v.cols();
  MatrixX<Scalar> state = MatrixX<Scalar>::Zero(dk, dv);
  MatrixX<Scalar> out(n, dv);
  MatrixX<Scalar> scores(chunk, chunk);
  MatrixX<Scalar> k_tail(chunk, dk);  // k_j scaled by decay from j+1 to the chunk end
  RowVectorX<Scalar> running(dk);
  for (Index c0 = 0; c0 < n; c0 += chunk) {
    const Index len = std::min(chunk, n - c0);
    scores.setZero();
    RowVectorX<Scalar> prefix(dk);  // decay product from chunk start through t
    for (Index t = 0; t < len; ++t) {
      running.setOnes();
      for (Index j = t; j >= 0; --j) {
        scores(t, j) = (q.row(c0 + t).array() * running.array() * k.row(c0 + j).array()).sum();
        running.array() *= decay.row(c0 + j).array();
      }
      prefix = running;
      out.row(c0 + t).noalias() = (q.row(c0 + t).array() * prefix.array()).matrix() * state;
      if (t == len - 1) {
        running.setOnes();
        for (Index j = t; j >= 0; --j) {
          k_tail.row(j) = (k.row(c0 + j).array() * running.array()).matrix();
          running.array() *= decay.row(c0 + j).array();
        }
      }
    }
    out.middleRows(c0, len).noalias() +=
        scores.topLeftCorner(len, len) * v.middleRows(c0, len);
    state.array().colwise() *= prefix.transpose().array();
    state.noalias() += k_tail.topRows(len).transpose() * v.middleRows(c0, len);
  }
  return out;
}

}  // namespace detail

/// Running d_k x d_v state of a linear-attention recurrence; s_0 = 0.
template <typename Scalar>
class RecurrentState {
 public:
  RecurrentState(Index key_dim, Index value_dim) : s_(MatrixX<Scalar>::Zero(key_dim, value_dim)) {}

  /// Advances one position: s <- diag(decay) s + k^T v, returns q s.
  template <typename Q, typename K, typename V, typename D>
  RowVectorX<Scalar> step(const Eigen::MatrixBase<Q>& q, const Eigen::MatrixBase<K>& k,
                          const Eigen::MatrixBase<V>& v, const Eigen::MatrixBase<D>& decay) {
    s_.array().colwise() *= decay.transpose().array();
    s_.noalias() += k.transpose() * v;
    ++t_;
    return q * s_;
  }

  /// Undecayed step (vanilla linear attention).
  template <typename Q, typename K, typename V>
  RowVectorX<Scalar> step(const Eigen::MatrixBase<Q>& q, const Eigen::MatrixBase<K>& k,
                          const Eigen::MatrixBase<V>& v) {
    s_.noalias() += k.transpose() * v;
    ++t_;
    return q * s_;
  }

  const MatrixX<Scalar>& state() const { return s_; }
  /// Number of positions consumed so far (the 1-based index of the last one).
  Index position() const { return t_; }
  std::size_t bytes() const { return std::size_t(s_.size()) * sizeof(Scalar); }
  void reset() {
    s_.setZero();
    t_ = 0;
  }

 private:
  MatrixX<Scalar> s_;
  Index t_ = 0;
};

/// softmax(q k^T / sqrt(d_k)) v, optionally causally masked.
template <typename Q, typename K, typename V>
MatrixX<typename Q::Scalar> softmax_attention(const Eigen::MatrixBase<Q>& q,
                                              const Eigen::MatrixBase<K>& k,
                                              const Eigen::MatrixBase<V>& v, bool causal) {
  using Scalar = typename Q::Scalar;
  detail::check_qkv(q, k, v, "softmax_attention");
  const Index n = q.rows();
  MatrixX<Scalar> scores = (q * k.transpose()) / std::sqrt(Scalar(q.cols()));
  for (Index i = 0; i < n; ++i) {
    const Index visible = causal ? i + 1 : n;
    const Scalar row_max = scores.row(i).head(visible).maxCoeff();
    scores.row(i).head(visible) = (scores.row(i).head(visible).array() - row_max).exp().matrix();
    scores.row(i).tail(n - visible).setZero();
    scores.row(i) /= scores.row(i).head(visible).sum();
  }
  return scores * v;
}

/// Kernelized linear attention in matrix form. `delta` divides by
/// phi(Q)[phi(K)^T 1] and is non-causal only; `rms` normalizes each output row.
template <typename Q, typename K, typename V>
MatrixX<typename Q::Scalar> linear_attention_parallel(const Eigen::MatrixBase<Q>& q,
                                                      const Eigen::MatrixBase<K>& k,
                                                      const Eigen::MatrixBase<V>& v, FeatureMap phi,
                                                      Normalization norm, bool causal,
                                                      typename Q::Scalar eps = 1e-6) {
  using Scalar = typename Q::Scalar;
  detail::check_qkv(q, k, v, "linear_attention_parallel");
  const MatrixX<Scalar> fq = detail::feature_map(q, phi);
  const MatrixX<Scalar> fk = detail::feature_map(k, phi);
  if (norm == Normalization::delta) {
    if (causal) throw ConfigError("delta normalization is only defined for the non-causal form");
    const MatrixX<Scalar> numer = fq * (fk.transpose() * v);
    const auto denom = (fq * fk.colwise().sum().transpose()).eval();
    MatrixX<Scalar> out(numer.rows(), numer.cols());
    for (Index i = 0; i < numer.rows(); ++i) {
      if (denom(i) == Scalar(0)) {
        throw DomainError("singular normalizer: row " + std::to_string(i) + " has zero row-sum");
      }
      out.row(i) = numer.row(i) / denom(i);
    }
    return out;
  }
  MatrixX<Scalar> raw;
  if (causal) {
    MatrixX<Scalar> weights = fq * fk.transpose();
    weights.template triangularView<Eigen::StrictlyUpper>().setZero();
    raw = weights * v;
  } else {
    raw = fq * (fk.transpose() * v);
  }
  return detail::rms_rows(raw, eps);
}

/// Causal linear attention as a scan: s_t = s_{t-1} + k_t^T v_t, o_t = q_t s_t.
template <typename Q, typename K, typename V>
MatrixX<typename Q::Scalar> linear_attention_recurrent(const Eigen::MatrixBase<Q>& q,
                                                       const Eigen::MatrixBase<K>& k,
                                                       const Eigen::MatrixBase<V>& v) {
  using Scalar = typename Q::Scalar;
  detail::check_qkv(q, k, v, "linear_attention_recurrent");
  RecurrentState<Scalar> state(k.cols(), v.cols());
  MatrixX<Scalar> out(q.rows(), v.cols());
  for (Index t = 0; t < q.rows(); ++t) out.row(t) = state.step(q.row(t), k.row(t), v.row(t));
  return out;
}

/// Decayed scan s_t = diag(decay_t) s_{t-1} + k_t^T v_t with decay in (0, 1].
template <typename Q, typename K, typename V, typename D>
MatrixX<typename Q::Scalar> decay_attention_recurrent(const Eigen::MatrixBase<Q>& q,
                                                      const Eigen::MatrixBase<K>& k,
                                                      const Eigen::MatrixBase<V>& v,
                                                      const Eigen::MatrixBase<D>& decay) {
  detail::check_qkv(q, k, v, "decay_attention_recurrent");
  detail::require_same_shape(k, decay, "decay_attention_recurrent");
  detail::require_decay_range(decay, false, "decay_attention_recurrent");
  return detail::decay_scan(q, k, v, decay);
}

/// Parameter-shared decay scan: key tied to 1 - decay.
template <typename Q, typename V, typename D>
MatrixX<typename Q::Scalar> hgrn2_recurrent(const Eigen::MatrixBase<Q>& q,
                                            const Eigen::MatrixBase<V>& v,
                                            const Eigen::MatrixBase<D>& decay) {
  using Scalar = typename Q::Scalar;
  const MatrixX<Scalar> key = (Scalar(1) - decay.array()).matrix();
  return decay_attention_recurrent(q, key, v, decay);
}

struct LasadOptions {
  /// 1-based position of row 0 of the inputs.
  Index first_position = 1;
  BoundaryMode boundary = BoundaryMode::retain;
};

namespace detail {

template <typename Q, typename V, typename D>
void check_lasad(const Eigen::MatrixBase<Q>& q, const Eigen::MatrixBase<V>& v,
                 const Eigen::MatrixBase<D>& decay, Index width, const char* what) {
  if (width <= 0) throw ConfigError(std::string(what) + ": width must be >= 1, got " + std::to_string(width));
  check_qkv(q, decay, v, what);
  require_decay_range(decay, false, what);
}

}  // namespace detail

/// Linear attention with spatial-aware decay. The key is 1 - decay using the
/// unmodified decay; the state decay is overridden at row boundaries.
template <typename Q, typename V, typename D>
MatrixX<typename Q::Scalar> lasad_recurrent(const Eigen::MatrixBase<Q>& q,
                                            const Eigen::MatrixBase<V>& v,
                                            const Eigen::MatrixBase<D>& decay, Index width,
                                            LasadOptions options = {}) {
  using Scalar = typename Q::Scalar;
  detail::check_lasad(q, v, decay, width, "lasad_recurrent");
  const MatrixX<Scalar> key = (Scalar(1) - decay.array()).matrix();
  const MatrixX<Scalar> spatial = spatial_decay(decay, width, options.first_position, options.boundary);
  return detail::decay_scan(q, key, v, spatial);
}

/// Chunked form of lasad_recurrent; the result does not depend on `chunk`
/// beyond rounding.
template <typename Q, typename V, typename D>
MatrixX<typename Q::Scalar> lasad_chunked(const Eigen::MatrixBase<Q>& q,
                                          const Eigen::MatrixBase<V>& v,
                                          const Eigen::MatrixBase<D>& decay, Index width,
                                          Index chunk, LasadOptions options = {}) {
  using Scalar = typename Q::Scalar;
  detail::check_lasad(q, v, decay, width, "lasad_chunked");
  const MatrixX<Scalar> key = (Scalar(1) - decay.array()).matrix();
  const MatrixX<Scalar> spatial = spatial_decay(decay, width, options.first_position, options.boundary);
  return detail::decay_scan_chunked(q, key, v, spatial, chunk);
}

/// Explicit O(N^2 d) evaluation o_t = sum_{j<=t} (q_t . a_{t,j} . k_j) v_j
/// with a_{t,j} = prod_{i=j+1..t} decay_i. For tests; refuses N > 256.
template <typename Q, typename K, typename V, typename D>
MatrixX<typename Q::Scalar> materialized_decay_oracle(const Eigen::MatrixBase<Q>& q,
                                                      const Eigen::MatrixBase<K>& k,
                                                      const Eigen::MatrixBase<V>& v,
                                                      const Eigen::MatrixBase<D>& decay) {
  using Scalar = typename Q::Scalar;
  detail::check_qkv(q, k, v, "materialized_decay_oracle");
  detail::require_same_shape(k, decay, "materialized_decay_oracle");
  const Index n = q.rows();
  if (n > kOracleMaxLength) {
    throw UsageError("materialized_decay_oracle: N=" + std::to_string(n) + " exceeds the oracle cap of " +
                     std::to_string(kOracleMaxLength));
  }
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(n, v.cols());
  for (Index t = 0; t < n; ++t) {
    for (Index j = 0; j <= t; ++j) {
      Scalar weight = 0;
      for (Index m = 0; m < k.cols(); ++m) {
        Scalar a = 1;
        for (Index i = j + 1; i <= t; ++i) a *= decay(i, m);
        weight += q(t, m) * a * k(j, m);
      }
      out.row(t) += weight * v.row(j);
    }
  }
  return out;
}

/// Decay families expressible through the generic decayed scan.
struct DecayVariant {
  enum class Kind { none, constant, data_dependent, hgrn2_shared, lasad };

  Kind kind = Kind::none;
  double constant = 1.0;  ///< for Kind::constant, in (0, 1]
  Index width = 0;        ///< for Kind::lasad
  BoundaryMode boundary = BoundaryMode::retain;

  static DecayVariant none() { return {}; }
  static DecayVariant constant_decay(double lambda) { return {Kind::constant, lambda}; }
  static DecayVariant data_dependent() { return {Kind::data_dependent}; }
  static DecayVariant hgrn2_shared() { return {Kind::hgrn2_shared}; }
  static DecayVariant lasad(Index width, BoundaryMode mode = BoundaryMode::retain) {
    return {Kind::lasad, 1.0, width, mode};
  }

  /// True for the kinds that tie the key to 1 - decay.
  bool shares_key() const { return kind == Kind::hgrn2_shared || kind == Kind::lasad; }
};

/// Per-position decay actually applied to the state for `variant`. `gates`
/// (N x d_k) supplies the data-dependent decay and is ignored otherwise.
template <typename D>
MatrixX<typename D::Scalar> effective_decay(const DecayVariant& variant,
                                            const Eigen::MatrixBase<D>& gates) {
  using Scalar = typename D::Scalar;
  using Kind = DecayVariant::Kind;
  switch (variant.kind) {
    case Kind::none:
      return MatrixX<Scalar>::Ones(gates.rows(), gates.cols());
    case Kind::constant:
      if (!(variant.constant > 0.0 && variant.constant <= 1.0)) {
        throw ContractError("constant decay must lie in (0, 1], got " + std::to_string(variant.constant));
      }
      return MatrixX<Scalar>::Constant(gates.rows(), gates.cols(), Scalar(variant.constant));
    case Kind::data_dependent:
    case Kind::hgrn2_shared:
      return gates;
    case Kind::lasad:
      return spatial_decay(gates, variant.width, 1, variant.boundary);
  }
  return gates;
}

/// Dispatches a decay variant onto the sequential scan. For key-sharing
/// variants `k` is ignored and 1 - gates is used instead.
template <typename Q, typename K, typename V, typename D>
MatrixX<typename Q::Scalar> decay_attention_recurrent(const Eigen::MatrixBase<Q>& q,
                                                      const Eigen::MatrixBase<K>& k,
                                                      const Eigen::MatrixBase<V>& v,
                                                      const DecayVariant& variant,
                                                      const Eigen::MatrixBase<D>& gates) {
  using Scalar = typename Q::Scalar;
  switch (variant.kind) {
    case DecayVariant::Kind::hgrn2_shared:
      return hgrn2_recurrent(q, v, gates);
    case DecayVariant::Kind::lasad:
      return lasad_recurrent(q, v, gates, variant.width, {1, variant.boundary});
    default: {
      detail::check_qkv(q, k, v, "decay_attention_recurrent");
      const MatrixX<Scalar> decay = effective_decay(variant, gates);
      detail::require_decay_range(decay, false, "decay_attention_recurrent");
      return detail::decay_scan(q, k, v, decay);
    }
  }
}

}  // namespace lasad::attention

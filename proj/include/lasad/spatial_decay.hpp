#pragma once

// Spatial-aware decay: maps per-position decay vectors of a raster-flattened
// h x w grid to decay vectors that skip the decay at the last token of each
// row. Positions are 1-based: position t closes a row iff t mod w == 0.

#include "lasad/common.hpp"

#include <cmath>
#include <vector>

namespace lasad {

/// What happens to the decay at a row boundary. `retain` sets it to 1 (the
/// state passes through the boundary unchanged); `reset` sets it to 0 and is
/// only meant for experiments.
enum class BoundaryMode { retain, reset };

/// True iff 1-based position `t` is the last token of a row of width `width`.
inline bool is_row_boundary(Index t, Index width) { return t >= 1 && t % width == 0; }

/// Row-boundary override applied to a decay schedule. Row i of `base` holds
/// the decay of position first_position + i.
template <typename Derived>
MatrixX<typename Derived::Scalar> spatial_decay(const Eigen::MatrixBase<Derived>& base, Index width,
                                                Index first_position = 1,
                                                BoundaryMode mode = BoundaryMode::retain) {
  using Scalar = typename Derived::Scalar;
  if (width <= 0) {
    throw ConfigError("spatial decay width must be >= 1, got " + std::to_string(width));
  }
  MatrixX<Scalar> out = base;
  const Scalar boundary_value = mode == BoundaryMode::retain ? Scalar(1) : Scalar(0);
  for (Index i = 0; i < out.rows(); ++i) {
    if (is_row_boundary(first_position + i, width)) out.row(i).setConstant(boundary_value);
  }
  return out;
}

/// The same override written in log space:
/// log(spatial_t) = log(base_t) * indicator(t mod w), indicator(x) = (x != 0).
template <typename Derived>
MatrixX<typename Derived::Scalar> spatial_decay_logspace(const Eigen::MatrixBase<Derived>& base,
                                                         Index width, Index first_position = 1) {
  using Scalar = typename Derived::Scalar;
  if (width <= 0) {
    throw ConfigError("spatial decay width must be >= 1, got " + std::to_string(width));
  }
  MatrixX<Scalar> out(base.rows(), base.cols());
  for (Index i = 0; i < base.rows(); ++i) {
    const Index t = first_position + i;
    const Scalar indicator = is_row_boundary(t, width) ? Scalar(0) : Scalar(1);
    out.row(i) = (base.row(i).array().log() * indicator).exp().matrix();
  }
  return out;
}

struct SpatialDecaySchedule {
  Index width = 0;
  Index length = 0;
  Matrix base;      ///< N x d_k, clamped gate values
  Matrix spatial;   ///< N x d_k, base with boundary rows set to 1
  std::vector<Index> boundary_positions;  ///< 1-based, ascending
};

/// Builds the schedule for positions 1..N. Non-boundary base entries must lie
/// in [kDecayFloor, kDecayCeil]; boundary entries in [kDecayFloor, 1], so an
/// already-overridden schedule can be fed back in.
SpatialDecaySchedule build_schedule(const Matrix& base_decay, Index width);

/// Largest elementwise gap between the stored spatial field and the
/// log-space formula on the stored base, measured both as values and as logs.
double logspace_max_error(const SpatialDecaySchedule& schedule);

/// True iff the branch construction and the log-space formula agree within
/// `tolerance` elementwise and spatial is exactly 1 at boundaries.
bool verify_logspace_equivalence(const SpatialDecaySchedule& schedule, double tolerance = 1e-12);

}  // namespace lasad

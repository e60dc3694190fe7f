#include "lasad/spatial_decay.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace lasad {

SpatialDecaySchedule build_schedule(const Matrix& base_decay, Index width) {
  if (width <= 0) throw ConfigError("build_schedule: width must be >= 1, got " + std::to_string(width));
  if (base_decay.rows() < 1 || base_decay.cols() < 1) {
    throw ConfigError("build_schedule: base decay must be N x d_k with N, d_k >= 1, got " +
                      shape_string(base_decay.rows(), base_decay.cols()));
  }
  SpatialDecaySchedule schedule;
  schedule.width = width;
  schedule.length = base_decay.rows();
  for (Index i = 0; i < base_decay.rows(); ++i) {
    const Index t = i + 1;
    const bool boundary = is_row_boundary(t, width);
    const double hi = boundary ? 1.0 : kDecayCeil;
    for (Index j = 0; j < base_decay.cols(); ++j) {
      const double x = base_decay(i, j);
      if (!(x >= kDecayFloor && x <= hi)) {
        throw ConfigError("build_schedule: base decay " + std::to_string(x) + " at position " + std::to_string(t) +
                          " outside the clamped range");
      }
    }
    if (boundary) schedule.boundary_positions.push_back(t);
  }
  schedule.base = base_decay;
  schedule.spatial = spatial_decay(base_decay, width);
  return schedule;
}

double logspace_max_error(const SpatialDecaySchedule& schedule) {
  const Matrix reference = spatial_decay_logspace(schedule.base, schedule.width);
  if (reference.rows() != schedule.spatial.rows() || reference.cols() != schedule.spatial.cols()) {
    throw DimensionError("logspace_max_error: spatial field has shape " +
                         shape_string(schedule.spatial.rows(), schedule.spatial.cols()) + ", base has " +
                         shape_string(reference.rows(), reference.cols()));
  }
  double err = (reference - schedule.spatial).cwiseAbs().maxCoeff();
  for (Index i = 0; i < schedule.base.rows(); ++i) {
    const double indicator = ((i + 1) % schedule.width) != 0 ? 1.0 : 0.0;
    const RowVector log_form = schedule.base.row(i).array().log() * indicator;
    err = std::max(err, (schedule.spatial.row(i).array().log() - log_form.array()).abs().maxCoeff());
  }
  return err;
}

bool verify_logspace_equivalence(const SpatialDecaySchedule& schedule, double tolerance) {
  if (logspace_max_error(schedule) > tolerance) return false;
  for (Index t : schedule.boundary_positions) {
    if ((schedule.spatial.row(t - 1).array() != 1.0).any()) return false;
  }
  return true;
}

}  // namespace lasad

#pragma once

// Central finite-difference check of reverse-mode gradients.

#include "lasad/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>

namespace lasad {

/// Builds a scalar loss from leaves bound to the checked inputs.
using LossFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Relative error is |a - b| / max(|a|, |b|, floor).
  double floor = 1e-6;
  /// Entries checked per input; <= 0 checks all, otherwise a seeded sample.
  Index max_entries = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index entries = 0;
  /// "input[i](r,c)" of the worst entry.
  std::string worst;
};

/// Compares backward() against (f(x + h) - f(x - h)) / 2h entrywise. Inputs
/// are perturbed in place and restored. A non-finite gradient or loss makes
/// max_rel_error infinite.
GradCheckResult gradient_check(const LossFn& loss, std::span<Matrix* const> inputs, const GradCheckOptions& options = {});

}  // namespace lasad

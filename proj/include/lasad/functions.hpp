#pragma once

// Scalar activations shared by the taped ops and the inference path so both
// produce identical bits.

#include "lasad/common.hpp"

#include <algorithm>
#include <cmath>

namespace lasad::fn {

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) {
    return Scalar(1) / (Scalar(1) + exp(-x));
  }
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar silu(Scalar x) {
  return x * sigmoid(x);
}

template <typename Scalar>
Scalar silu_grad(Scalar x) {
  const Scalar s = sigmoid(x);
  return s * (Scalar(1) + x * (Scalar(1) - s));
}

// elu(x) + 1, strictly positive feature map for kernelized attention.
template <typename Scalar>
Scalar elu_plus_one(Scalar x) {
  using std::exp;
  return x > Scalar(0) ? x + Scalar(1) : exp(x);
}

template <typename Scalar>
Scalar elu_plus_one_grad(Scalar x) {
  using std::exp;
  return x > Scalar(0) ? Scalar(1) : exp(x);
}

template <typename Scalar>
Scalar clamp_decay(Scalar x) {
  return std::clamp(x, Scalar(kDecayFloor), Scalar(kDecayCeil));
}

/// Sigmoid gate clamped into [kDecayFloor, kDecayCeil].
template <typename Scalar>
Scalar decay_gate(Scalar x) {
  return clamp_decay(sigmoid(x));
}

}  // namespace lasad::fn

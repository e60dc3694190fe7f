#pragma once

// Taped versions of the attention scans used by the model.

#include "lasad/spatial_decay.hpp"
#include "lasad/tensor.hpp"

namespace lasad {

/// Decayed linear-attention scan over a batch of sequences and heads.
/// Rows are grouped into sequences of `seq_len`; columns of q, k, decay
/// (d_k * heads) and v (d_v * heads) are split evenly into heads. Every
/// sequence starts from a zero state.
Var decay_scan(Var q, Var k, Var v, Var decay, Index seq_len, Index heads);

/// Row-boundary override of a decay matrix. Row r has position
/// first_position + (r mod seq_len); rows at row boundaries are replaced by
/// the boundary value and receive no gradient.
Var spatial_override(Var decay, Index width, Index seq_len, Index first_position,
                     BoundaryMode mode = BoundaryMode::retain);

}  // namespace lasad

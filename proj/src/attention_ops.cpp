#include "lasad/attention_ops.hpp"

#include "lasad/attention.hpp"

#include <memory>
#include <vector>

namespace lasad {

Var decay_scan(Var q, Var k, Var v, Var decay, Index seq_len, Index heads) {
  const Matrix& qm = q.value();
  const Matrix& km = k.value();
  const Matrix& vm = v.value();
  const Matrix& dm = decay.value();
  if (qm.rows() != km.rows() || qm.cols() != km.cols() || dm.rows() != km.rows() || dm.cols() != km.cols() ||
      vm.rows() != qm.rows()) {
    throw DimensionError("decay_scan: q " + shape_string(qm.rows(), qm.cols()) + ", k " +
                         shape_string(km.rows(), km.cols()) + ", v " + shape_string(vm.rows(), vm.cols()) +
                         ", decay " + shape_string(dm.rows(), dm.cols()));
  }
  if (heads < 1 || qm.cols() % heads != 0 || vm.cols() % heads != 0) {
    throw DimensionError("decay_scan: feature dims not divisible by " + std::to_string(heads) + " heads");
  }
  if (seq_len < 1 || qm.rows() % seq_len != 0) {
    throw DimensionError("decay_scan: " + std::to_string(qm.rows()) + " rows is not a multiple of seq_len " +
                         std::to_string(seq_len));
  }
  const Index dk = qm.cols() / heads;
  const Index dv = vm.cols() / heads;
  const Index batch = qm.rows() / seq_len;
  const bool keep_states = q.tracked() || k.tracked() || v.tracked() || decay.tracked();

  // states[b * heads + h] holds s_1..s_seq_len for that block.
  auto states = std::make_shared<std::vector<std::vector<Matrix>>>();
  if (keep_states) states->resize(std::size_t(batch * heads));

  Matrix out(qm.rows(), vm.cols());
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const Index r0 = b * seq_len;
      out.block(r0, h * dv, seq_len, dv) = attention::detail::decay_scan(
          qm.block(r0, h * dk, seq_len, dk), km.block(r0, h * dk, seq_len, dk), vm.block(r0, h * dv, seq_len, dv),
          dm.block(r0, h * dk, seq_len, dk), keep_states ? &(*states)[std::size_t(b * heads + h)] : nullptr);
    }
  }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id(), id = decay.id();
  const Var inputs[] = {q, k, v, decay};
  return q.tape().record(
      std::move(out), inputs,
      [=](Tape& tape, const Matrix& g) {
        const Matrix& qm = tape.value(iq);
        const Matrix& km = tape.value(ik);
        const Matrix& vm = tape.value(iv);
        const Matrix& dm = tape.value(id);
        Matrix dq(qm.rows(), qm.cols()), dk_(km.rows(), km.cols()), dv_(vm.rows(), vm.cols()),
            dd(dm.rows(), dm.cols());
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const Index r0 = b * seq_len;
            auto grads = attention::detail::decay_scan_backward(
                qm.block(r0, h * dk, seq_len, dk), km.block(r0, h * dk, seq_len, dk),
                vm.block(r0, h * dv, seq_len, dv), dm.block(r0, h * dk, seq_len, dk),
                (*states)[std::size_t(b * heads + h)], g.block(r0, h * dv, seq_len, dv));
            dq.block(r0, h * dk, seq_len, dk) = grads.dq;
            dk_.block(r0, h * dk, seq_len, dk) = grads.dk;
            dv_.block(r0, h * dv, seq_len, dv) = grads.dv;
            dd.block(r0, h * dk, seq_len, dk) = grads.ddecay;
          }
        }
        tape.accumulate(iq, dq);
        tape.accumulate(ik, dk_);
        tape.accumulate(iv, dv_);
        tape.accumulate(id, dd);
      },
      "decay_scan");
}

Var spatial_override(Var decay, Index width, Index seq_len, Index first_position, BoundaryMode mode) {
  if (width <= 0) throw ConfigError("spatial_override: width must be >= 1, got " + std::to_string(width));
  const Matrix& dm = decay.value();
  if (seq_len < 1 || dm.rows() % seq_len != 0) {
    throw DimensionError("spatial_override: rows not a multiple of seq_len");
  }
  Matrix out = dm;
  std::vector<Index> boundary_rows;
  const double value = mode == BoundaryMode::retain ? 1.0 : 0.0;
  for (Index r = 0; r < out.rows(); ++r) {
    if (is_row_boundary(first_position + r % seq_len, width)) {
      out.row(r).setConstant(value);
      boundary_rows.push_back(r);
    }
  }
  const std::size_t id = decay.id();
  return decay.tape().record(std::move(out), {&decay, 1},
                             [id, boundary_rows](Tape& tape, const Matrix& g) {
                               if (!tape.tracked(id)) return;
                               Matrix d = g;
                               for (Index r : boundary_rows) d.row(r).setZero();
                               tape.grad_ref(id) += d;
                             },
                             "spatial_override");
}

}  // namespace lasad

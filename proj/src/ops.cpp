#include "lasad/functions.hpp"
#include "lasad/tensor.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace lasad {
namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) +
                         " vs " + shape_string(b.rows(), b.cols()));
  }
}

template <typename F, typename G>
Var unary(Var a, const char* op, F forward, G derivative) {
  const Matrix& x = a.value();
  Matrix out = x.unaryExpr(forward);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {&a, 1},
                         [ia, derivative](Tape& tape, const Matrix& g) {
                           const Matrix& x = tape.value(ia);
                           tape.accumulate(ia, g.cwiseProduct(x.unaryExpr(derivative)));
                         },
                         op);
}

}  // namespace

Var matmul(Var a, Var b) {
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  if (x.cols() != y.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(x.rows(), x.cols()) +
                         " x " + shape_string(y.rows(), y.cols()));
  }
  Matrix out = x * y;
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs,
                         [ia, ib](Tape& tape, const Matrix& g) {
                           if (tape.tracked(ia)) tape.grad_ref(ia).noalias() += g * tape.value(ib).transpose();
                           if (tape.tracked(ib)) tape.grad_ref(ib).noalias() += tape.value(ia).transpose() * g;
                         },
                         "matmul");
}

Var transpose(Var a) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value().transpose(), {&a, 1},
                         [ia](Tape& tape, const Matrix& g) { tape.accumulate(ia, g.transpose()); },
                         "transpose");
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(a.value() + b.value(), inputs,
                         [ia, ib](Tape& tape, const Matrix& g) {
                           tape.accumulate(ia, g);
                           tape.accumulate(ib, g);
                         },
                         "add");
}

Var add(Var a, double s) {
  const std::size_t ia = a.id();
  return a.tape().record((a.value().array() + s).matrix(), {&a, 1},
                         [ia](Tape& tape, const Matrix& g) { tape.accumulate(ia, g); }, "add_scalar");
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(a.value() - b.value(), inputs,
                         [ia, ib](Tape& tape, const Matrix& g) {
                           tape.accumulate(ia, g);
                           if (tape.tracked(ib)) tape.grad_ref(ib) -= g;
                         },
                         "sub");
}

Var rsub(double s, Var a) {
  const std::size_t ia = a.id();
  return a.tape().record((s - a.value().array()).matrix(), {&a, 1},
                         [ia](Tape& tape, const Matrix& g) {
                           if (tape.tracked(ia)) tape.grad_ref(ia) -= g;
                         },
                         "rsub");
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(a.value().cwiseProduct(b.value()), inputs,
                         [ia, ib](Tape& tape, const Matrix& g) {
                           if (tape.tracked(ia)) tape.grad_ref(ia) += g.cwiseProduct(tape.value(ib));
                           if (tape.tracked(ib)) tape.grad_ref(ib) += g.cwiseProduct(tape.value(ia));
                         },
                         "mul");
}

Var scale(Var a, double s) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value() * s, {&a, 1},
                         [ia, s](Tape& tape, const Matrix& g) { tape.accumulate(ia, g * s); }, "scale");
}

Var neg(Var a) { return scale(a, -1.0); }

Var sigmoid(Var a) {
  const Matrix out = a.value().unaryExpr([](double x) { return fn::sigmoid(x); });
  const std::size_t ia = a.id();
  return a.tape().record(out, {&a, 1},
                         [ia, out](Tape& tape, const Matrix& g) {
                           tape.accumulate(ia, g.cwiseProduct(out.cwiseProduct((1.0 - out.array()).matrix())));
                         },
                         "sigmoid");
}

Var silu(Var a) {
  return unary(
      a, "silu", [](double x) { return fn::silu(x); }, [](double x) { return fn::silu_grad(x); });
}

Var exp(Var a) {
  const Matrix out = a.value().array().exp().matrix();
  const std::size_t ia = a.id();
  return a.tape().record(out, {&a, 1},
                         [ia, out](Tape& tape, const Matrix& g) { tape.accumulate(ia, g.cwiseProduct(out)); },
                         "exp");
}

Var log(Var a) {
  const Matrix& x = a.value();
  for (Index i = 0; i < x.size(); ++i) {
    if (!(x.data()[i] > 0.0)) {
      throw DomainError("log: non-positive argument " + std::to_string(x.data()[i]) + " at flat index " +
                        std::to_string(i));
    }
  }
  return unary(
      a, "log", [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Var elu_plus_one(Var a) {
  return unary(
      a, "elu_plus_one", [](double x) { return fn::elu_plus_one(x); },
      [](double x) { return fn::elu_plus_one_grad(x); });
}

Var clamp(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw DomainError("clamp: empty interval");
  return unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var add_row(Var a, Var bias) {
  const Matrix& x = a.value();
  const Matrix& b = bias.value();
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw DimensionError("add_row: bias " + shape_string(b.rows(), b.cols()) + " does not fit rows of " +
                         shape_string(x.rows(), x.cols()));
  }
  Matrix out = x.rowwise() + b.row(0);
  const std::size_t ia = a.id();
  const std::size_t ib = bias.id();
  const Var inputs[] = {a, bias};
  return a.tape().record(std::move(out), inputs,
                         [ia, ib](Tape& tape, const Matrix& g) {
                           tape.accumulate(ia, g);
                           if (tape.tracked(ib)) tape.grad_ref(ib) += g.colwise().sum();
                         },
                         "add_row");
}

Var elementwise(Unary op, Var a) {
  switch (op) {
    case Unary::neg:
      return neg(a);
    case Unary::sigmoid:
      return sigmoid(a);
    case Unary::silu:
      return silu(a);
    case Unary::exp:
      return exp(a);
    case Unary::log:
      return log(a);
    case Unary::elu_plus_one:
      return elu_plus_one(a);
  }
  throw UsageError("elementwise: unknown unary op");
}

Var elementwise(Binary op, Var a, Var b) {
  switch (op) {
    case Binary::add:
      return add(a, b);
    case Binary::sub:
      return sub(a, b);
    case Binary::mul:
      return mul(a, b);
  }
  throw UsageError("elementwise: unknown binary op");
}

Var softmax_rows(Var a, bool causal) {
  const Matrix& x = a.value();
  if (causal && x.rows() > x.cols()) {
    throw DimensionError("softmax_rows: causal mask needs cols >= rows, got " + shape_string(x.rows(), x.cols()));
  }
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Index visible = causal ? i + 1 : x.cols();
    const double row_max = x.row(i).head(visible).maxCoeff();
    out.row(i).head(visible) = (x.row(i).head(visible).array() - row_max).exp().matrix();
    out.row(i).head(visible) /= out.row(i).head(visible).sum();
  }
  const std::size_t ia = a.id();
  return a.tape().record(out, {&a, 1},
                         [ia, out](Tape& tape, const Matrix& g) {
                           // dx = y * (g - sum(g * y)) per row; masked entries have y = 0.
                           const Eigen::VectorXd dots = g.cwiseProduct(out).rowwise().sum();
                           Matrix dx = out.cwiseProduct((g.colwise() - dots));
                           tape.accumulate(ia, dx);
                         },
                         "softmax_rows");
}

Matrix rms_norm_rows(const Matrix& x, const RowVector& gain, double eps) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double inv = 1.0 / std::sqrt(x.row(i).squaredNorm() / double(x.cols()) + eps);
    out.row(i) = (x.row(i) * inv).cwiseProduct(gain);
  }
  return out;
}

Var rms_norm(Var a, Var gain, double eps) {
  const Matrix& x = a.value();
  const Matrix& w = gain.value();
  if (x.cols() < 1) throw DimensionError("rms_norm: last dimension must be >= 1");
  if (w.rows() != 1 || w.cols() != x.cols()) {
    throw DimensionError("rms_norm: gain " + shape_string(w.rows(), w.cols()) + " does not match " +
                         shape_string(x.rows(), x.cols()));
  }
  Eigen::VectorXd inv(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const double denom = std::sqrt(x.row(i).squaredNorm() / double(x.cols()) + eps);
    if (!(denom > 0.0)) throw NumericError("rms_norm: zero row with eps = 0");
    inv(i) = 1.0 / denom;
  }
  Matrix normalized = inv.asDiagonal() * x;
  Matrix out = normalized.array().rowwise() * w.row(0).array();
  const std::size_t ia = a.id();
  const std::size_t ig = gain.id();
  const Var inputs[] = {a, gain};
  return a.tape().record(std::move(out), inputs,
                         [ia, ig, inv, normalized](Tape& tape, const Matrix& g) {
                           const Matrix& w = tape.value(ig);
                           if (tape.tracked(ig)) tape.grad_ref(ig) += g.cwiseProduct(normalized).colwise().sum();
                           if (tape.tracked(ia)) {
                             // y = n * w, n = x * r; dx = r * (gw - n * mean(gw * n)).
                             const Matrix gw = g.array().rowwise() * w.row(0).array();
                             const double d = double(normalized.cols());
                             const Eigen::VectorXd proj = gw.cwiseProduct(normalized).rowwise().sum() / d;
                             Matrix dx = gw - proj.asDiagonal() * normalized;
                             tape.grad_ref(ia) += inv.asDiagonal() * dx;
                           }
                         },
                         "rms_norm");
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {&a, 1},
                         [ia](Tape& tape, const Matrix& g) {
                           if (tape.tracked(ia)) tape.grad_ref(ia).array() += g(0, 0);
                         },
                         "sum");
}

Var mean(Var a) {
  const double n = double(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var slice_rows(Var a, Index begin, Index count) {
  const Matrix& x = a.value();
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_string(x.rows(), x.cols()));
  }
  const std::size_t ia = a.id();
  return a.tape().record(x.middleRows(begin, count), {&a, 1},
                         [ia, begin, count](Tape& tape, const Matrix& g) {
                           if (tape.tracked(ia)) tape.grad_ref(ia).middleRows(begin, count) += g;
                         },
                         "slice_rows");
}

Var slice_cols(Var a, Index begin, Index count) {
  const Matrix& x = a.value();
  if (begin < 0 || count < 0 || begin + count > x.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_string(x.rows(), x.cols()));
  }
  const std::size_t ia = a.id();
  return a.tape().record(x.middleCols(begin, count), {&a, 1},
                         [ia, begin, count](Tape& tape, const Matrix& g) {
                           if (tape.tracked(ia)) tape.grad_ref(ia).middleCols(begin, count) += g;
                         },
                         "slice_cols");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Index>> spans;
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    spans.emplace_back(p.id(), offset);
    offset += p.rows();
  }
  return parts[0].tape().record(std::move(out), parts,
                                [spans](Tape& tape, const Matrix& g) {
                                  for (const auto& [id, off] : spans) {
                                    if (tape.tracked(id)) tape.grad_ref(id) += g.middleRows(off, tape.value(id).rows());
                                  }
                                },
                                "concat_rows");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Index>> spans;
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    spans.emplace_back(p.id(), offset);
    offset += p.cols();
  }
  return parts[0].tape().record(std::move(out), parts,
                                [spans](Tape& tape, const Matrix& g) {
                                  for (const auto& [id, off] : spans) {
                                    if (tape.tracked(id)) tape.grad_ref(id) += g.middleCols(off, tape.value(id).cols());
                                  }
                                },
                                "concat_cols");
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Matrix& t = table.value();
  Matrix out(Index(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) {
      throw InputError("gather_rows: id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(t.rows()) + ")");
    }
    out.row(Index(i)) = t.row(ids[i]);
  }
  const std::size_t it = table.id();
  std::vector<int> rows(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {&table, 1},
                             [it, rows = std::move(rows)](Tape& tape, const Matrix& g) {
                               if (!tape.tracked(it)) return;
                               Matrix& dt = tape.grad_ref(it);
                               for (std::size_t i = 0; i < rows.size(); ++i) dt.row(rows[i]) += g.row(Index(i));
                             },
                             "gather_rows");
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const Matrix& x = logits.value();
  if (Index(targets.size()) != x.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_string(x.rows(), x.cols()) + " logits");
  }
  Matrix probs(x.rows(), x.cols());
  double total = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    const int target = targets[std::size_t(i)];
    if (target < 0 || target >= x.cols()) {
      throw InputError("cross_entropy: target " + std::to_string(target) + " outside [0, " +
                       std::to_string(x.cols()) + ")");
    }
    const double row_max = x.row(i).maxCoeff();
    probs.row(i) = (x.row(i).array() - row_max).exp().matrix();
    const double z = probs.row(i).sum();
    probs.row(i) /= z;
    total += std::log(z) + row_max - x(i, target);
  }
  Matrix out(1, 1);
  out(0, 0) = total / double(x.rows());
  const std::size_t il = logits.id();
  std::vector<int> tgt(targets.begin(), targets.end());
  return logits.tape().record(std::move(out), {&logits, 1},
                              [il, probs = std::move(probs), tgt = std::move(tgt)](Tape& tape, const Matrix& g) {
                                if (!tape.tracked(il)) return;
                                Matrix d = probs;
                                for (std::size_t i = 0; i < tgt.size(); ++i) d(Index(i), tgt[i]) -= 1.0;
                                tape.grad_ref(il) += d * (g(0, 0) / double(tgt.size()));
                              },
                              "cross_entropy");
}

namespace {

// Rotates consecutive pairs (2i, 2i+1) of each head slice by position * base^(-2i/head_dim).
void rotate_row(Eigen::Ref<RowVector> row, Index heads, Index position, double base, double sign) {
  const Index head_dim = row.cols() / heads;
  for (Index h = 0; h < heads; ++h) {
    for (Index i = 0; i + 1 < head_dim; i += 2) {
      const double freq = std::pow(base, -double(i) / double(head_dim));
      const double angle = sign * double(position) * freq;
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      const Index col = h * head_dim + i;
      const double x0 = row(col);
      const double x1 = row(col + 1);
      row(col) = x0 * c - x1 * s;
      row(col + 1) = x0 * s + x1 * c;
    }
  }
}

}  // namespace

void rope_row_inplace(Eigen::Ref<RowVector> row, Index heads, Index position, double base) {
  rotate_row(row, heads, position, base, 1.0);
}

Var rope(Var a, Index heads, Index seq_len, double base) {
  const Matrix& x = a.value();
  if (heads < 1 || x.cols() % heads != 0) throw DimensionError("rope: columns not divisible by heads");
  if (seq_len < 1 || x.rows() % seq_len != 0) throw DimensionError("rope: rows not divisible by seq_len");
  Matrix out = x;
  for (Index r = 0; r < out.rows(); ++r) {
    RowVector row = out.row(r);
    rotate_row(row, heads, r % seq_len, base, 1.0);
    out.row(r) = row;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {&a, 1},
                         [ia, heads, seq_len, base](Tape& tape, const Matrix& g) {
                           if (!tape.tracked(ia)) return;
                           Matrix d = g;
                           for (Index r = 0; r < d.rows(); ++r) {
                             RowVector row = d.row(r);
                             rotate_row(row, heads, r % seq_len, base, -1.0);
                             d.row(r) = row;
                           }
                           tape.grad_ref(ia) += d;
                         },
                         "rope");
}

}  // namespace lasad

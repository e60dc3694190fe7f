#include "lasad/tensor.hpp"

namespace lasad {

Tensor::Tensor(Index rows, Index cols, bool requires_grad)
    : data_(Matrix::Zero(rows, cols)), requires_grad_(requires_grad) {}

Tensor::Tensor(Matrix data, bool requires_grad) : data_(std::move(data)), requires_grad_(requires_grad) {}

const Matrix& Tensor::grad() const {
  if (!grad_) throw UsageError("tensor has no gradient; run backward() on a loss that depends on it");
  return *grad_;
}

Matrix& Tensor::grad_buffer() {
  if (!grad_) grad_ = Matrix::Zero(data_.rows(), data_.cols());
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) grad_->setZero();
}

Tape& Var::tape() const {
  if (tape_ == nullptr) throw UsageError("Var is not attached to a tape");
  return *tape_;
}

const Matrix& Var::value() const { return tape().value(id_); }

bool Var::tracked() const { return tape().tracked(id_); }

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw DimensionError("item() on non-scalar " + shape_string(v.rows(), v.cols()));
  return v(0, 0);
}

Var Tape::leaf(Tensor& tensor) {
  return leaf(tensor.data(), tensor.requires_grad() ? &tensor.grad_buffer() : nullptr);
}

Var Tape::leaf(const Matrix& value, Matrix* grad_sink) {
  Node node;
  node.external = &value;
  node.tracked = grad_sink != nullptr;
  node.sink = grad_sink;
  node.op = "leaf";
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value) {
  check_finite(value, "constant");
  Node node;
  node.value = std::move(value);
  node.op = "constant";
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn backward, const char* op) {
  check_finite(value, op);
  Node node;
  node.value = std::move(value);
  node.op = op;
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw UsageError(std::string(op) + ": inputs live on different tapes");
    if (nodes_[in.id()].tracked) node.tracked = true;
  }
  if (node.tracked) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

const Matrix& Tape::value(std::size_t id) const {
  const Node& node = nodes_.at(id);
  return node.external != nullptr ? *node.external : node.value;
}

Matrix& Tape::grad_ref(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.has_grad) {
    const Matrix& v = value(id);
    node.grad = Matrix::Zero(v.rows(), v.cols());
    node.has_grad = true;
  }
  return node.grad;
}

void Tape::accumulate(std::size_t id, const Matrix& contribution) {
  if (!nodes_[id].tracked) return;
  grad_ref(id) += contribution;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw UsageError("backward: loss belongs to another tape");
  const std::size_t root = loss.id();
  if (value(root).size() != 1) {
    throw UsageError("backward: loss must be a scalar, got " +
                     shape_string(value(root).rows(), value(root).cols()));
  }
  if (!nodes_[root].tracked) throw UsageError("backward: loss does not depend on any tracked tensor");

  grad_ref(root).setConstant(1.0);
  last_visits_ = 0;
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad) continue;
    if (node.backward) {
      // The rule may append to other nodes' grads but never to this one.
      const Matrix grad = std::move(node.grad);
      node.has_grad = false;
      node.backward(*this, grad);
      ++last_visits_;
    } else if (node.sink != nullptr) {
      *node.sink += node.grad;
    }
  }
  clear();
}

void Tape::clear() { nodes_.clear(); }

void backward(Var loss) { loss.tape().backward(loss); }

void check_finite(const Matrix& m, const char* op) {
  if (!m.allFinite()) throw NumericError(std::string(op) + ": produced a non-finite value");
}

}  // namespace lasad

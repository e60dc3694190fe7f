#include "lasad/train.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

namespace lasad {

AdamW::AdamW(const Model& model, OptimizerConfig config) : config_(config) {
  for (const auto& p : model.parameters()) {
    m_.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
    v_.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
  }
}

double AdamW::step(Model& model, std::vector<Matrix>& grads) {
  auto& params = model.parameters();
  if (grads.size() != params.size() || m_.size() != params.size()) {
    throw DimensionError("AdamW: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  }
  double sq = 0.0;
  for (const Matrix& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw TrainingDiverged("gradient norm is not finite");
  const double clip = (config_.max_grad_norm > 0.0 && norm > config_.max_grad_norm) ? config_.max_grad_norm / norm : 1.0;

  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, double(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, double(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& w = params[i].tensor.data();
    const Matrix g = grads[i] * clip;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    if (params[i].decays) w *= 1.0 - config_.lr * config_.weight_decay;
    w.array() -= config_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
  return norm;
}

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t step) {
  // splitmix64 finalizer over the pair.
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (step + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<TraceRow> train(Model& model, AdamW& optimizer, std::span<const TokenGrid> dataset,
                            const TrainOptions& options) {
  if (dataset.empty() && options.steps > 0) throw InputError("train: empty dataset");
  if (options.batch < 1) throw ConfigError("train: batch must be >= 1");
  const ModelConfig& c = model.config();
  std::vector<TraceRow> trace;
  const auto start = std::chrono::steady_clock::now();
  std::vector<Matrix> grads;
  std::vector<TokenGrid> batch(std::size_t(options.batch));
  std::vector<int> labels(std::size_t(options.batch));

  for (std::int64_t i = 0; i < options.steps; ++i) {
    const std::int64_t step = optimizer.steps() + 1;
    std::mt19937_64 rng(mix(options.seed, std::uint64_t(step)));
    std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
    std::bernoulli_distribution drop(c.cfg_dropout);
    for (int b = 0; b < options.batch; ++b) {
      batch[std::size_t(b)] = dataset[pick(rng)];
      labels[std::size_t(b)] = drop(rng) ? c.null_label() : batch[std::size_t(b)].label;
    }

    double loss = 0.0;
    try {
      Tape tape;
      for (Matrix& g : grads) g.setZero();
      const auto params = model.bind(tape, &grads);
      const Var l = model.batch_loss(tape, params, batch, labels);
      loss = l.item();
      tape.backward(l);
    } catch (const NumericError& e) {
      throw TrainingDiverged("step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss)) throw TrainingDiverged("step " + std::to_string(step) + ": loss is not finite");
    optimizer.step(model, grads);

    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    TraceRow row{step, loss, optimizer.config().lr, seconds};
    trace.push_back(row);
    if (options.on_step) options.on_step(row);
  }
  return trace;
}

double evaluate(const Model& model, std::span<const TokenGrid> grids) {
  if (grids.empty()) throw InputError("evaluate: no grids");
  // Batched in fixed-size groups; the result only depends on the grids.
  constexpr std::size_t kGroup = 32;
  double total = 0.0;
  for (std::size_t begin = 0; begin < grids.size(); begin += kGroup) {
    const std::size_t count = std::min(kGroup, grids.size() - begin);
    std::vector<int> labels;
    for (std::size_t i = 0; i < count; ++i) labels.push_back(grids[begin + i].label);
    Tape tape;
    const auto params = model.bind(tape);
    total += model.batch_loss(tape, params, grids.subspan(begin, count), labels).item() * double(count);
  }
  return total / double(grids.size());
}

void write_trace_header(std::ostream& out) { out << "step,loss,lr,seconds\n"; }

void write_trace_row(std::ostream& out, const TraceRow& row) {
  out << row.step << ',' << std::setprecision(17) << row.loss << ',' << row.lr << ',' << std::setprecision(6)
      << row.seconds << '\n';
}

std::vector<TraceRow> read_trace(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "step,loss,lr,seconds") {
    throw InputError("trace: missing header 'step,loss,lr,seconds'");
  }
  std::vector<TraceRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    TraceRow row;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(fields >> row.step >> c1 >> row.loss >> c2 >> row.lr >> c3 >> row.seconds) || c1 != ',' || c2 != ',' ||
        c3 != ',') {
      throw InputError("trace: malformed row '" + line + "'");
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace lasad

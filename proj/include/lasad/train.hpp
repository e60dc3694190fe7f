#pragma once

#include "lasad/model.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace lasad {

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double eps = 1e-8;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double max_grad_norm = 1.0;
};

/// Decoupled-weight-decay Adam. Moments are aligned with Model::parameters().
class AdamW {
 public:
  AdamW() = default;
  AdamW(const Model& model, OptimizerConfig config);

  const OptimizerConfig& config() const { return config_; }
  std::int64_t steps() const { return steps_; }
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  void set_steps(std::int64_t steps) { steps_ = steps; }

  /// One update from `grads`; returns the pre-clip global gradient norm.
  double step(Model& model, std::vector<Matrix>& grads);

 private:
  OptimizerConfig config_;
  std::vector<Matrix> m_, v_;
  std::int64_t steps_ = 0;
};

struct TraceRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainOptions {
  OptimizerConfig optimizer;
  int batch = 16;
  std::int64_t steps = 0;
  /// Seeds batch selection and class-label dropout; step s uses a stream
  /// derived from (seed, s) so a resumed run replays the same batches.
  std::uint64_t seed = 0;
  std::function<void(const TraceRow&)> on_step;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// Runs `options.steps` AdamW steps starting after optimizer.steps().
/// Throws TrainingDiverged when the loss stops being finite.
std::vector<TraceRow> train(Model& model, AdamW& optimizer, std::span<const TokenGrid> dataset,
                            const TrainOptions& options);

/// Mean per-grid loss under each grid's own label.
double evaluate(const Model& model, std::span<const TokenGrid> grids);

/// `step,loss,lr,seconds` CSV.
void write_trace_header(std::ostream& out);
void write_trace_row(std::ostream& out, const TraceRow& row);
std::vector<TraceRow> read_trace(std::istream& in);

}  // namespace lasad

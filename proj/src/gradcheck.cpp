#include "lasad/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace lasad {

namespace {

double evaluate(const LossFn& loss, std::span<Matrix* const> inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (Matrix* m : inputs) leaves.push_back(tape.leaf(*m, nullptr));
  return loss(tape, leaves).item();
}

}  // namespace

GradCheckResult gradient_check(const LossFn& loss, std::span<Matrix* const> inputs, const GradCheckOptions& options) {
  GradCheckResult result;
  constexpr double inf = std::numeric_limits<double>::infinity();

  std::vector<Matrix> grads;
  for (Matrix* m : inputs) grads.push_back(Matrix::Zero(m->rows(), m->cols()));
  try {
    Tape tape;
    std::vector<Var> leaves;
    for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(tape.leaf(*inputs[i], &grads[i]));
    tape.backward(loss(tape, leaves));
  } catch (const Error& e) {
    result.max_rel_error = inf;
    result.max_abs_error = inf;
    result.worst = std::string("backward failed: ") + e.what();
    return result;
  }

  std::mt19937_64 rng(options.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Matrix& x = *inputs[i];
    std::vector<Index> entries(std::size_t(x.size()));
    std::iota(entries.begin(), entries.end(), Index(0));
    if (options.max_entries > 0 && Index(entries.size()) > options.max_entries) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(std::size_t(options.max_entries));
    }
    for (Index e : entries) {
      const Index r = e / x.cols(), c = e % x.cols();
      const double saved = x(r, c);
      double numeric = std::numeric_limits<double>::quiet_NaN();
      try {
        x(r, c) = saved + options.step;
        const double up = evaluate(loss, inputs);
        x(r, c) = saved - options.step;
        const double down = evaluate(loss, inputs);
        numeric = (up - down) / (2.0 * options.step);
      } catch (const Error&) {
      }
      x(r, c) = saved;

      const double analytic = grads[i](r, c);
      double abs_err = std::abs(analytic - numeric);
      double rel_err = abs_err / std::max({std::abs(analytic), std::abs(numeric), options.floor});
      if (!std::isfinite(rel_err)) abs_err = rel_err = inf;
      ++result.entries;
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      if (rel_err > result.max_rel_error || result.worst.empty()) {
        result.max_rel_error = std::max(result.max_rel_error, rel_err);
        if (rel_err >= result.max_rel_error) {
          result.worst = "input[" + std::to_string(i) + "](" + std::to_string(r) + "," + std::to_string(c) + ")";
        }
      }
    }
  }
  return result;
}

}  // namespace lasad

#include "lasad/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lasad {

RowVector guide_logits(const RowVector& cond, const RowVector& uncond, double scale) {
  // Written so that scale 0 and 1 reproduce uncond and cond bit for bit.
  return (1.0 - scale) * uncond + scale * cond;
}

int sample_token(const RowVector& logits, double temperature, int top_k, std::mt19937_64& rng) {
  const Index v = logits.size();
  if (v < 1) throw InputError("sample_token: empty logits");
  if (temperature <= 0.0 || top_k == 1) {
    Index best = 0;
    logits.maxCoeff(&best);
    return int(best);
  }
  std::vector<Index> order(static_cast<std::size_t>(v));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return logits(a) > logits(b); });
  const Index keep = (top_k > 0 && top_k < v) ? top_k : v;
  const double top = logits(order[0]) / temperature;
  std::vector<double> weights(static_cast<std::size_t>(keep));
  for (Index i = 0; i < keep; ++i) weights[std::size_t(i)] = std::exp(logits(order[std::size_t(i)]) / temperature - top);
  std::discrete_distribution<int> pick(weights.begin(), weights.end());
  return int(order[std::size_t(pick(rng))]);
}

TokenGrid sample(const Model& model, int label, const SampleOptions& options, std::vector<RowVector>* trace) {
  const ModelConfig& c = model.config();
  if (label < 0 || label > c.null_label()) {
    throw InputError("sample: label " + std::to_string(label) + " outside [0, " + std::to_string(c.null_label()) + "]");
  }
  if (!(options.cfg_scale >= 0.0)) throw InputError("sample: cfg scale must be >= 0");
  std::mt19937_64 rng(options.seed);
  Decoder cond(model, label);
  Decoder uncond(model, c.null_label());
  const bool guided = label != c.null_label();

  TokenGrid grid{c.grid_height, c.grid_width, {}, label};
  grid.tokens.reserve(std::size_t(c.seq_len()));
  for (int t = 0; t < c.seq_len(); ++t) {
    const RowVector logits = guided ? guide_logits(cond.logits(), uncond.logits(), options.cfg_scale) : uncond.logits();
    if (trace != nullptr) trace->push_back(logits);
    const int token = sample_token(logits, options.temperature, options.top_k, rng);
    grid.tokens.push_back(token);
    if (t + 1 < c.seq_len()) {
      if (guided) cond.push(token);
      uncond.push(token);
    }
  }
  return grid;
}

}  // namespace lasad

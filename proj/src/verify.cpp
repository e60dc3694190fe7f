#include "lasad/attention.hpp"
#include "lasad/attention_ops.hpp"
#include "lasad/functions.hpp"
#include "lasad/gradcheck.hpp"
#include "lasad/harness.hpp"
#include "lasad/spatial_decay.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>

namespace lasad {

namespace {

using attention::LasadOptions;

constexpr double kInf = std::numeric_limits<double>::infinity();

class Suite {
 public:
  Suite(std::string scope, std::vector<CheckResult>& out) : scope_(std::move(scope)), out_(out) {}

  /// Passes when error <= tolerance (and is finite).
  void check(std::string property, double error, double tolerance, std::string detail = {}) {
    const bool pass = std::isfinite(error) && error <= tolerance;
    out_.push_back({scope_, std::move(property), error, tolerance, pass, std::move(detail)});
  }

  /// Runs `body`; an escaping library error is reported as a failure.
  template <typename F>
  void guarded(const std::string& property, double tolerance, F body) {
    try {
      body();
    } catch (const std::exception& e) {
      check(property, kInf, tolerance, e.what());
    }
  }

 private:
  std::string scope_;
  std::vector<CheckResult>& out_;
};

Matrix randn(std::mt19937_64& rng, Index r, Index c, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

Matrix rand_decay(std::mt19937_64& rng, Index r, Index c, double lo = 0.05, double hi = 0.999) {
  std::uniform_real_distribution<double> uniform(lo, hi);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng);
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return kInf;
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

/// Scalar projection that keeps every output entry relevant to the gradient.
Var project(Var out, const Matrix& weights) { return sum(mul(out, out.tape().constant(weights))); }

// ---------------------------------------------------------------------------

void numerics(std::vector<CheckResult>& out, Fault fault) {
  Suite s("numerics", out);
  std::mt19937_64 rng(11);

  {
    const double lo = fn::sigmoid(-1000.0), hi = fn::sigmoid(1000.0);
    const double err = (std::isfinite(lo) && std::isfinite(hi)) ? std::abs(lo) + std::abs(1.0 - hi) : kInf;
    s.check("sigmoid finite at |x| = 1000", err, 0.0);
  }

  struct OpCase {
    const char* name;
    std::vector<Matrix> inputs;
    LossFn loss;
  };
  const Matrix w34 = randn(rng, 3, 4), w33 = randn(rng, 3, 3), w6x4 = randn(rng, 6, 4);
  std::vector<OpCase> cases;
  cases.push_back({"matmul", {randn(rng, 3, 5), randn(rng, 5, 4)},
                   [&](Tape&, std::span<const Var> v) { return project(matmul(v[0], v[1]), w34); }});
  cases.push_back({"softmax_rows causal", {randn(rng, 3, 3)},
                   [&](Tape&, std::span<const Var> v) { return project(softmax_rows(v[0], true), w33); }});
  cases.push_back({"rms_norm", {randn(rng, 3, 4), randn(rng, 1, 4)},
                   [&](Tape&, std::span<const Var> v) { return project(rms_norm(v[0], v[1], 1e-6), w34); }});
  cases.push_back({"silu, elu+1, sigmoid", {randn(rng, 3, 4)}, [&](Tape&, std::span<const Var> v) {
                     return project(mul(silu(v[0]), add(elu_plus_one(v[0]), sigmoid(v[0]))), w34);
                   }});
  cases.push_back({"log of exp", {randn(rng, 3, 4)},
                   [&](Tape&, std::span<const Var> v) { return project(log(add(exp(v[0]), 1.0)), w34); }});
  cases.push_back({"cross_entropy", {randn(rng, 3, 4)}, [&](Tape&, std::span<const Var> v) {
                     const int targets[] = {1, 3, 0};
                     return cross_entropy(v[0], targets);
                   }});
  cases.push_back({"rope", {randn(rng, 6, 4)},
                   [&](Tape&, std::span<const Var> v) { return project(rope(v[0], 2, 3), w6x4); }});
  cases.push_back({"decay_scan", {randn(rng, 6, 4), randn(rng, 6, 4), randn(rng, 6, 4), randn(rng, 6, 4)},
                   [&](Tape&, std::span<const Var> v) {
                     const Var gate = clamp(sigmoid(v[3]), kDecayFloor, kDecayCeil);
                     return project(decay_scan(v[0], v[1], v[2], gate, 3, 2), w6x4);
                   }});
  for (auto& c : cases) {
    s.guarded(std::string("gradient: ") + c.name, 1e-6, [&] {
      std::vector<Matrix*> ptrs;
      for (auto& m : c.inputs) ptrs.push_back(&m);
      const auto r = gradient_check(c.loss, ptrs);
      s.check(std::string("gradient: ") + c.name, r.max_rel_error, 1e-6, r.worst);
    });
  }

  // Saturated gate logits: the clamp keeps log(decay) and its gradient finite.
  {
    Matrix x(2, 4);
    x << -800.0, -40.0, 0.3, 2.0, 800.0, 40.0, -1.5, 0.0;
    const bool clamped = fault != Fault::no_clamp;
    const LossFn loss = [clamped](Tape&, std::span<const Var> v) {
      const Var gate = clamped ? clamp(sigmoid(v[0]), kDecayFloor, kDecayCeil) : sigmoid(v[0]);
      const Var sp = spatial_override(gate, 2, 2, 1);
      return sum(log(sp));
    };
    Matrix* ptrs[] = {&x};
    const auto r = gradient_check(loss, ptrs);
    s.check("gradient: log spatial decay, saturated gates", r.max_rel_error, 1e-6, r.worst);
  }
}

// ---------------------------------------------------------------------------

void attention_suite(std::vector<CheckResult>& out) {
  Suite s("attention", out);
  std::mt19937_64 rng(23);

  s.guarded("lasad_recurrent vs materialized oracle", 1e-10, [&] {
    double err = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const Index n = 8 + 4 * trial, d = 4 + trial % 3, w = 2 + trial % 5;
      const Matrix q = randn(rng, n, d), v = randn(rng, n, d), lam = rand_decay(rng, n, d);
      const Matrix sp = spatial_decay(lam, w);
      const Matrix key = (1.0 - lam.array()).matrix();
      err = std::max(err, max_abs_diff(attention::lasad_recurrent(q, v, lam, w),
                                       attention::materialized_decay_oracle(q, key, v, sp)));
    }
    s.check("lasad_recurrent vs materialized oracle", err, 1e-10);
  });

  s.guarded("chunk invariance", 1e-10, [&] {
    const Index n = 40, d = 6, w = 5;
    const Matrix q = randn(rng, n, d), v = randn(rng, n, d), lam = rand_decay(rng, n, d);
    const Matrix ref = attention::lasad_recurrent(q, v, lam, w);
    double err = 0.0;
    for (Index c : {Index(1), Index(2), Index(4), Index(16), Index(32), n}) {
      err = std::max(err, max_abs_diff(attention::lasad_chunked(q, v, lam, w, c), ref));
    }
    s.check("chunk invariance", err, 1e-10);
  });

  s.guarded("decay = 1 equals linear attention (bitwise)", 0.0, [&] {
    const Index n = 24, d = 5;
    const Matrix q = randn(rng, n, d), k = randn(rng, n, d), v = randn(rng, n, d);
    const Matrix ones = Matrix::Ones(n, d);
    s.check("decay = 1 equals linear attention (bitwise)",
            max_abs_diff(attention::decay_attention_recurrent(q, k, v, ones), attention::linear_attention_recurrent(q, k, v)),
            0.0);
  });

  s.guarded("width > N equals HGRN2 (bitwise)", 0.0, [&] {
    const Index n = 24, d = 5;
    const Matrix q = randn(rng, n, d), v = randn(rng, n, d), lam = rand_decay(rng, n, d);
    s.check("width > N equals HGRN2 (bitwise)",
            max_abs_diff(attention::lasad_recurrent(q, v, lam, n + 1), attention::hgrn2_recurrent(q, v, lam)), 0.0);
  });

  s.guarded("parallel vs recurrent linear attention", 1e-10, [&] {
    const Index n = 20, d = 4;
    const Matrix q = randn(rng, n, d), k = randn(rng, n, d), v = randn(rng, n, d);
    const Matrix par = attention::linear_attention_parallel(q, k, v, attention::FeatureMap::elu_plus_one,
                                                            attention::Normalization::rms, true);
    const Matrix fq = q.unaryExpr([](double x) { return fn::elu_plus_one(x); });
    const Matrix fk = k.unaryExpr([](double x) { return fn::elu_plus_one(x); });
    const Matrix rec = attention::detail::rms_rows(attention::linear_attention_recurrent(fq, fk, v), 1e-6);
    s.check("parallel vs recurrent linear attention", max_abs_diff(par, rec), 1e-10);
  });

  s.guarded("kernel causality (bitwise)", 0.0, [&] {
    const Index n = 16, d = 4, cut = 9;
    Matrix q = randn(rng, n, d), k = randn(rng, n, d), v = randn(rng, n, d), lam = rand_decay(rng, n, d);
    const Matrix a1 = attention::lasad_recurrent(q, v, lam, 4), b1 = attention::lasad_chunked(q, v, lam, 4, 4);
    const Matrix c1 = attention::softmax_attention(q, k, v, true);
    q.bottomRows(n - cut) = randn(rng, n - cut, d);
    k.bottomRows(n - cut) = randn(rng, n - cut, d);
    v.bottomRows(n - cut) = randn(rng, n - cut, d);
    lam.bottomRows(n - cut) = rand_decay(rng, n - cut, d);
    const Matrix a2 = attention::lasad_recurrent(q, v, lam, 4), b2 = attention::lasad_chunked(q, v, lam, 4, 4);
    const Matrix c2 = attention::softmax_attention(q, k, v, true);
    const double err = std::max({max_abs_diff(a1.topRows(cut), a2.topRows(cut)),
                                 max_abs_diff(b1.topRows(cut), b2.topRows(cut)),
                                 max_abs_diff(c1.topRows(cut), c2.topRows(cut))});
    s.check("kernel causality (bitwise)", err, 0.0);
  });
}

// ---------------------------------------------------------------------------

void sad_suite(std::vector<CheckResult>& out) {
  Suite s("sad", out);
  std::mt19937_64 rng(37);
  std::uniform_int_distribution<Index> pick_n(1, 96), pick_w(1, 20);

  s.guarded("logspace form vs branch form", 1e-12, [&] {
    double err = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Index n = pick_n(rng), w = pick_w(rng);
      const auto schedule = build_schedule(rand_decay(rng, n, 3, kDecayFloor, kDecayCeil), w);
      err = std::max(err, logspace_max_error(schedule));
    }
    s.check("logspace form vs branch form", err, 1e-12);
  });

  s.guarded("boundary positions are multiples of width", 0.0, [&] {
    double mismatches = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const Index n = pick_n(rng), w = pick_w(rng);
      const auto schedule = build_schedule(rand_decay(rng, n, 2), w);
      std::vector<Index> expected;
      for (Index t = w; t <= n; t += w) expected.push_back(t);
      if (schedule.boundary_positions != expected) mismatches += 1.0;
      for (Index t : expected) {
        if ((schedule.spatial.row(t - 1).array() != 1.0).any()) mismatches += 1.0;
      }
    }
    s.check("boundary positions are multiples of width", mismatches, 0.0);
  });

  s.guarded("override is idempotent", 0.0, [&] {
    const Matrix lam = rand_decay(rng, 30, 4);
    const Matrix once = spatial_decay(lam, 4);
    s.check("override is idempotent", max_abs_diff(spatial_decay(once, 4), once), 0.0);
  });

  s.guarded("width > N leaves decay unchanged", 0.0, [&] {
    const Matrix lam = rand_decay(rng, 30, 4);
    s.check("width > N leaves decay unchanged", max_abs_diff(spatial_decay(lam, 31), lam), 0.0);
  });

  s.guarded("reset mode zeroes boundary rows", 0.0, [&] {
    const Matrix lam = rand_decay(rng, 12, 3);
    const Matrix reset = spatial_decay(lam, 4, 1, BoundaryMode::reset);
    double err = 0.0;
    for (Index i = 0; i < 12; ++i) {
      const Matrix expected = is_row_boundary(i + 1, 4) ? Matrix::Zero(1, 3) : Matrix(lam.row(i));
      err = std::max(err, max_abs_diff(reset.row(i), expected));
    }
    s.check("reset mode zeroes boundary rows", err, 0.0);
  });

  s.guarded("no gradient through boundary rows", 0.0, [&] {
    const Index n = 12, d = 3, w = 4;
    Matrix lam = rand_decay(rng, n, d);
    Matrix grad = Matrix::Zero(n, d);
    Tape tape;
    tape.backward(sum(spatial_override(tape.leaf(lam, &grad), w, n, 1)));
    double err = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double expected = is_row_boundary(i + 1, w) ? 0.0 : 1.0;
      err = std::max(err, (grad.row(i).array() - expected).abs().maxCoeff());
    }
    s.check("no gradient through boundary rows", err, 0.0);
  });
}

// ---------------------------------------------------------------------------

const AttentionKind kAllKinds[] = {AttentionKind::softmax, AttentionKind::linear,         AttentionKind::constant_decay,
                                   AttentionKind::data_dependent, AttentionKind::hgrn2, AttentionKind::lasad,
                                   AttentionKind::hybrid};

ModelConfig small_config(AttentionKind kind) {
  ModelConfig c = ModelConfig::preset("nano");
  c.attention = kind;
  c.hidden = 16;
  c.heads = 2;
  c.mlp_multiple = 8;
  c.vocab = 8;
  c.classes = 3;
  return c;
}

std::vector<int> random_tokens(std::mt19937_64& rng, int count, int vocab) {
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  std::vector<int> t(static_cast<std::size_t>(count));
  for (int& x : t) x = tok(rng);
  return t;
}

void model_suite(std::vector<CheckResult>& out) {
  Suite s("model", out);
  std::mt19937_64 rng(53);

  s.guarded("gradient: nano model loss", 1e-4, [&] {
    ModelConfig c = small_config(AttentionKind::lasad);
    c.grid_height = 2;
    Model model(c, 3);
    const TokenGrid grid{c.grid_height, c.grid_width, random_tokens(rng, c.seq_len(), c.vocab), 1};
    std::vector<Matrix> values;
    for (const auto& p : model.parameters()) values.push_back(p.tensor.data());
    std::vector<Matrix*> ptrs;
    for (auto& m : values) ptrs.push_back(&m);
    const LossFn loss = [&](Tape& tape, std::span<const Var> p) {
      const TokenGrid grids[] = {grid};
      const int labels[] = {grid.label};
      return model.batch_loss(tape, p, grids, labels);
    };
    const auto r = gradient_check(loss, ptrs, {.max_entries = 24, .seed = 5});
    s.check("gradient: nano model loss", r.max_rel_error, 1e-4, r.worst);
  });

  double causal = 0.0, decode = 0.0, roundtrip = 0.0, count = 0.0;
  for (AttentionKind kind : kAllKinds) {
    const std::string name = to_string(kind);
    s.guarded("variant " + name, 0.0, [&] {
      const ModelConfig c = small_config(kind);
      const Model model(c, 7);
      const auto tokens = random_tokens(rng, c.seq_len(), c.vocab);
      const Matrix full = model.logits(tokens, 2);

      auto perturbed = tokens;
      const int cut = c.seq_len() / 2;
      for (std::size_t i = std::size_t(cut); i < perturbed.size(); ++i) perturbed[i] = (perturbed[i] + 1) % c.vocab;
      const Matrix other = model.logits(perturbed, 2);
      causal = std::max(causal, max_abs_diff(full.topRows(cut + 1), other.topRows(cut + 1)));

      Decoder dec(model, 2);
      for (int t = 0; t < c.seq_len(); ++t) {
        decode = std::max(decode, max_abs_diff(dec.logits(), full.row(t)));
        if (t + 1 < c.seq_len()) dec.push(tokens[std::size_t(t)]);
      }

      const Model restored = restore_model(decode_checkpoint(encode_checkpoint(make_checkpoint(model, nullptr, 0, 7))));
      roundtrip = std::max(roundtrip, max_abs_diff(restored.logits(tokens, 2), full));
      count = std::max(count, std::abs(double(model.parameter_count() - analytic_parameter_count(c))));
    });
  }
  s.check("causality, every variant (bitwise)", causal, 0.0);
  s.check("decode matches full forward, every variant", decode, 1e-9);
  s.check("checkpoint round trip (bitwise)", roundtrip, 0.0);
  s.check("parameter count matches closed form", count, 0.0);

  s.guarded("B preset parameter count vs 111M", 0.05, [&] {
    const double rel = std::abs(double(analytic_parameter_count(ModelConfig::preset("B"))) - 111e6) / 111e6;
    s.check("B preset parameter count vs 111M", rel, 0.05);
  });
}

}  // namespace

std::vector<std::string> verify_scopes() { return {"numerics", "attention", "sad", "model", "all"}; }

std::vector<CheckResult> run_verify(std::string_view scope, Fault fault) {
  const bool all = scope == "all";
  if (!all && scope != "numerics" && scope != "attention" && scope != "sad" && scope != "model") {
    throw UsageError("unknown verify scope '" + std::string(scope) + "' (numerics, attention, sad, model, all)");
  }
  std::vector<CheckResult> out;
  if (all || scope == "numerics") numerics(out, fault);
  if (all || scope == "attention") attention_suite(out);
  if (all || scope == "sad") sad_suite(out);
  if (all || scope == "model") model_suite(out);
  return out;
}

void print_checks(std::ostream& out, std::span<const CheckResult> checks) {
  for (const auto& c : checks) {
    out << (c.pass ? "PASS " : "FAIL ") << std::left << std::setw(10) << c.scope << std::setw(48) << c.property
        << " max_err=" << std::scientific << std::setprecision(3) << c.max_error << " tol=" << c.tolerance
        << std::defaultfloat;
    if (!c.detail.empty()) out << "  [" << c.detail << "]";
    out << '\n';
  }
}

}  // namespace lasad

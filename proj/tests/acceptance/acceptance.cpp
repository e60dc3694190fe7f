// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fail.

#include "lasad/attention.hpp"
#include "lasad/checkpoint.hpp"
#include "lasad/data.hpp"
#include "lasad/gradcheck.hpp"
#include "lasad/harness.hpp"
#include "lasad/model.hpp"
#include "lasad/spatial_decay.hpp"
#include "lasad/train.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace lasad;
namespace att = lasad::attention;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

Matrix randn(std::mt19937_64& rng, Index r, Index c) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

Matrix rand_decay(std::mt19937_64& rng, Index r, Index c) {
  std::uniform_real_distribution<double> uniform(0.05, 0.999);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng);
  return m;
}

Index uniform_index(std::mt19937_64& rng, Index lo, Index hi) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

std::vector<int> random_tokens(std::mt19937_64& rng, int count, int vocab) {
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  std::vector<int> t(static_cast<std::size_t>(count));
  for (int& x : t) x = tok(rng);
  return t;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

std::string fmt(const char* format, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

const AttentionKind kAllKinds[] = {AttentionKind::softmax, AttentionKind::linear,         AttentionKind::constant_decay,
                                   AttentionKind::data_dependent, AttentionKind::hgrn2, AttentionKind::lasad,
                                   AttentionKind::hybrid};

// Direct O(N^2) sum with the row-boundary override spelled out per term.
Matrix lasad_direct(const Matrix& q, const Matrix& v, const Matrix& decay, Index width) {
  const Index n = q.rows();
  Matrix out = Matrix::Zero(n, v.cols());
  for (Index t = 0; t < n; ++t) {
    for (Index j = 0; j <= t; ++j) {
      double weight = 0.0;
      for (Index m = 0; m < q.cols(); ++m) {
        double a = 1.0;
        for (Index i = j + 1; i <= t; ++i) a *= ((i + 1) % width == 0) ? 1.0 : decay(i, m);
        weight += q(t, m) * a * (1.0 - decay(j, m));
      }
      out.row(t) += weight * v.row(j);
    }
  }
  return out;
}

Outcome oracle_equivalence() {
  const auto start = Clock::now();
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int seed = 0; seed < 50; ++seed) {
    const Index n = uniform_index(rng, 1, 64), dk = uniform_index(rng, 1, 16), dv = uniform_index(rng, 1, 16);
    const Index w = uniform_index(rng, 1, 12);
    const Matrix q = randn(rng, n, dk), v = randn(rng, n, dv), decay = rand_decay(rng, n, dk);
    const Matrix fast = att::lasad_recurrent(q, v, decay, w);
    const Matrix key = (1.0 - decay.array()).matrix();
    const Matrix oracle = att::materialized_decay_oracle(q, key, v, spatial_decay(decay, w));
    worst = std::max({worst, max_abs_diff(fast, oracle), max_abs_diff(fast, lasad_direct(q, v, decay, w))});
  }
  const double elapsed = seconds_since(start);
  return {worst < 1e-10 && elapsed < 10.0, fmt("max abs diff %.3g (< 1e-10), %.2f s (< 10 s)", worst, elapsed)};
}

Outcome degeneracy_chain() {
  std::mt19937_64 rng(202);
  bool linear_ok = true, hgrn2_ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = uniform_index(rng, 1, 64), dk = uniform_index(rng, 1, 16), dv = uniform_index(rng, 1, 16);
    const Matrix q = randn(rng, n, dk), k = randn(rng, n, dk), v = randn(rng, n, dv);
    const Matrix ones = Matrix::Ones(n, dk);
    linear_ok = linear_ok && att::decay_attention_recurrent(q, k, v, ones) == att::linear_attention_recurrent(q, k, v);
    const Matrix decay = rand_decay(rng, n, dk);
    const Index w = n + uniform_index(rng, 1, 10);
    hgrn2_ok = hgrn2_ok && att::lasad_recurrent(q, v, decay, w) == att::hgrn2_recurrent(q, v, decay);
  }
  return {linear_ok && hgrn2_ok, fmt("decay 1 -> linear: %s; w > N -> hgrn2: %s (bit-identical, 20 trials)",
                                     linear_ok ? "identical" : "DIFFERS", hgrn2_ok ? "identical" : "DIFFERS")};
}

Outcome logspace_consistency() {
  std::mt19937_64 rng(303);
  double worst = 0.0;
  bool boundaries = true;
  for (int config = 0; config < 100; ++config) {
    const Index n = uniform_index(rng, 1, 256), dk = uniform_index(rng, 1, 16), w = uniform_index(rng, 1, 32);
    const SpatialDecaySchedule schedule = build_schedule(rand_decay(rng, n, dk), w);
    worst = std::max(worst, logspace_max_error(schedule));
    boundaries = boundaries && verify_logspace_equivalence(schedule, 1e-12);
  }
  return {worst <= 1e-12 && boundaries,
          fmt("max elementwise diff %.3g over 100 (N, w) configurations (<= 1e-12)", worst)};
}

Outcome chunk_invariance() {
  std::mt19937_64 rng(404);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Index n = uniform_index(rng, 33, 200), dk = uniform_index(rng, 1, 16), dv = uniform_index(rng, 1, 16);
    const Index w = uniform_index(rng, 1, 16);
    const Matrix q = randn(rng, n, dk), v = randn(rng, n, dv), decay = rand_decay(rng, n, dk);
    const Matrix reference = att::lasad_chunked(q, v, decay, w, 1);
    for (Index c : {Index(2), Index(4), Index(16), Index(32), n}) {
      worst = std::max(worst, max_abs_diff(att::lasad_chunked(q, v, decay, w, c), reference));
    }
    worst = std::max(worst, max_abs_diff(att::lasad_recurrent(q, v, decay, w), reference));
  }
  return {worst < 1e-10, fmt("max abs diff across C in {1,2,4,16,32,N}: %.3g (< 1e-10)", worst)};
}

Outcome gradient_correctness() {
  const auto start = Clock::now();
  ModelConfig c = ModelConfig::preset("nano");
  c.grid_height = 2;  // 2 x 4 grid: 8 tokens
  const Model model(c, 11);
  std::mt19937_64 rng(505);
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
  // Every tensor is checked; large ones through a seeded sample of 1024 entries.
  const GradCheckResult r = gradient_check(loss, ptrs, {.max_entries = 1024, .seed = 5});
  const double elapsed = seconds_since(start);
  return {r.max_rel_error < 1e-4 && elapsed < 60.0,
          fmt("max rel err %.3g (< 1e-4) over %lld of %lld parameters in all %zu tensors, %.1f s (< 60 s)",
              r.max_rel_error, static_cast<long long>(r.entries), static_cast<long long>(model.parameter_count()),
              ptrs.size(), elapsed)};
}

Outcome causality() {
  std::mt19937_64 rng(606);
  std::string broken;
  for (AttentionKind kind : kAllKinds) {
    ModelConfig c = ModelConfig::preset("nano");
    c.attention = kind;
    const Model model(c, 12);
    const auto tokens = random_tokens(rng, c.seq_len(), c.vocab);
    const Matrix full = model.logits(tokens, 1);
    bool ok = true;
    for (int cut = 0; cut < c.seq_len(); ++cut) {
      auto changed = tokens;
      for (std::size_t i = std::size_t(cut); i < changed.size(); ++i) changed[i] = (changed[i] + 1 + int(i)) % c.vocab;
      ok = ok && model.logits(changed, 1).topRows(cut + 1) == full.topRows(cut + 1);
    }
    if (!ok) broken += " " + to_string(kind);
  }
  return {broken.empty(), broken.empty() ? "past logits bit-identical for all 7 variants, every cut point"
                                         : "future leaks into past for:" + broken};
}

Outcome complexity() {
  const auto start = Clock::now();
  const BenchReport report = run_bench({});
  const double lasad = report.slope("lasad_recurrent"), softmax = report.slope("softmax");
  const double elapsed = seconds_since(start);
  return {lasad < 1.3 && softmax > 1.7 && elapsed < 600.0,
          fmt("slope lasad_recurrent %.3f (< 1.3), softmax %.3f (> 1.7), N 256..8192, d=64, %.0f s (< 600 s)", lasad,
              softmax, elapsed)};
}

struct Stats {
  double mean = 0.0, sd = 0.0;
};

Stats stats(const std::vector<double>& xs) {
  Stats s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - s.mean) * (x - s.mean);
  s.sd = std::sqrt(ss / double(xs.size() - 1));
  return s;
}

RunConfig ablation_run(Task task, AttentionKind kind, std::uint64_t seed) {
  RunConfig run;
  run.task = task;
  run.model.attention = kind;
  run.train_count = 32768;
  run.eval_count = 256;
  run.optimizer.lr = 1e-3;
  run.batch = 16;
  run.steps = 2000;
  run.seed = seed;
  run.log_every = 0;
  run.out_dir = default_out_dir() / "acceptance" / (to_string(task) + "-" + to_string(kind) + "-" + std::to_string(seed));
  return run;
}

Outcome sad_ablation() {
  const auto start = Clock::now();
  bool pass = true;
  std::string detail;
  for (Task task : {Task::column_stripe, Task::row_shift}) {
    std::vector<double> with_sad, without_sad;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      with_sad.push_back(run_train(ablation_run(task, AttentionKind::lasad, seed), std::nullopt).eval_loss);
      without_sad.push_back(run_train(ablation_run(task, AttentionKind::hgrn2, seed), std::nullopt).eval_loss);
    }
    const Stats a = stats(with_sad), b = stats(without_sad);
    const double sigma = std::max(a.sd, b.sd);
    const double margin = b.mean - a.mean;
    const bool ok = margin > 0.0 && margin >= 3.0 * sigma;
    pass = pass && ok;
    detail += fmt("%s: SAD %.4f +- %.4f, no SAD %.4f +- %.4f, margin %.4f vs 3 sigma %.4f; ", to_string(task).c_str(),
                  a.mean, a.sd, b.mean, b.sd, margin, 3.0 * sigma);
  }
  const double elapsed = seconds_since(start);
  pass = pass && elapsed < 1800.0;
  return {pass, detail + fmt("%.0f s (< 1800 s)", elapsed)};
}

Outcome decode_equivalence() {
  double worst = 0.0;
  for (AttentionKind kind : kAllKinds) {
    ModelConfig c = ModelConfig::preset("nano");
    c.attention = kind;
    const Model model(c, 13);
    for (int label = 0; label < c.classes; ++label) {
      SampleOptions o;
      o.seed = std::uint64_t(label);
      std::vector<RowVector> trace;
      const TokenGrid g = sample(model, label, o, &trace);
      const Matrix full = model.logits(g.tokens, label);
      for (int t = 0; t < c.seq_len(); ++t) worst = std::max(worst, max_abs_diff(trace[std::size_t(t)], full.row(t)));
    }
  }
  return {worst < 1e-9, fmt("max abs logit diff %.3g (< 1e-9), 4x4 grid, all variants", worst)};
}

Outcome checkpoint_round_trip() {
  SyntheticSpec spec{Task::row_shift, 4, 4, 16, 4, 256, 3};
  const auto data = generate(spec);
  Model model(ModelConfig::preset("nano"), 14);
  TrainOptions o;
  o.steps = 20;
  AdamW opt(model, o.optimizer);
  train(model, opt, data, o);

  const auto path = default_out_dir() / "acceptance" / "checkpoint.lasd";
  std::filesystem::create_directories(path.parent_path());
  save_checkpoint(make_checkpoint(model, &opt, opt.steps(), o.seed), path);
  const Model reloaded = restore_model(load_checkpoint(path));
  bool exact = true;
  double before = 0.0, after = 0.0;
  for (const TokenGrid& g : data) {
    const double x = model.loss(g), y = reloaded.loss(g);
    exact = exact && x == y;
    before += x;
    after += y;
  }
  return {exact, fmt("mean loss %.17g before, %.17g after save+load over %d grids (%s)", before / 256, after / 256, 256,
                     exact ? "bit-exact" : "DIFFERS")};
}

Outcome preset_parameter_count() {
  const std::int64_t count = analytic_parameter_count(ModelConfig::preset("B"));
  const double rel = std::abs(double(count) - 111e6) / 111e6;
  return {rel <= 0.05, fmt("B preset: %lld parameters, %.2f%% from 111M (<= 5%%)", static_cast<long long>(count),
                           100.0 * rel)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LASAD acceptance suite"};
  std::vector<std::string> only, known;
  app.add_option("criteria", only, "Run only criteria whose name contains one of these substrings");
  app.add_option("--known-failure", known, "Criterion still reported as FAIL but left out of the exit status");
  CLI11_PARSE(app, argc, argv);

  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"oracle equivalence", oracle_equivalence},
      {"degeneracy chain", degeneracy_chain},
      {"logspace consistency", logspace_consistency},
      {"chunk invariance", chunk_invariance},
      {"gradient correctness", gradient_correctness},
      {"causality", causality},
      {"complexity", complexity},
      {"SAD ablation", sad_ablation},
      {"decode-path equivalence", decode_equivalence},
      {"checkpoint round trip", checkpoint_round_trip},
      {"preset parameter count", preset_parameter_count},
  };
  int failures = 0, known_failures = 0;
  for (const auto& [name, run] : criteria) {
    const std::string label = name;
    if (!only.empty() && std::none_of(only.begin(), only.end(), [&](const std::string& s) {
          return label.find(s) != std::string::npos;
        })) {
      continue;
    }
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const bool is_known = std::find(known.begin(), known.end(), label) != known.end();
    if (!o.pass) ++(is_known ? known_failures : failures);
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << (!o.pass && is_known ? " [known failure]" : "")
              << std::endl;
  }
  std::cout << failures << " failed, " << known_failures << " known failures" << std::endl;
  return failures == 0 ? 0 : 1;
}

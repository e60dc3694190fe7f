#include "lasad/harness.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace lasad;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = default_out_dir() / "harness_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig small_run(const std::string& name) {
  std::istringstream text(
      "preset = nano\n"
      "hidden = 16\n"
      "vocab = 8\n"
      "classes = 3\n"
      "mlp_multiple = 8\n"
      "task = row_copy\n"
      "train_count = 64\n"
      "eval_count = 16\n"
      "batch = 4\n"
      "steps = 10\n"
      "log_every = 0\n");
  RunConfig run = RunConfig::parse(text);
  run.out_dir = scratch(name);
  return run;
}

// Fraction of rows after the first that equal the previous row shifted by the
// amount the grid's label asks for.
double shift_compliance(std::span<const TokenGrid> grids, int classes_mod) {
  int ok = 0, total = 0;
  for (const TokenGrid& g : grids) {
    const int shift = 1 + g.label % classes_mod;
    for (int r = 1; r < g.height; ++r) {
      bool row_ok = true;
      for (int c = 0; c < g.width; ++c) row_ok = row_ok && g.at(r, (c + shift) % g.width) == g.at(r - 1, c);
      ok += row_ok ? 1 : 0;
      ++total;
    }
  }
  return double(ok) / double(total);
}

}  // namespace

TEST_CASE("run config round trip") {
  RunConfig run = small_run("config");
  run.optimizer.lr = 0.000123456789;
  run.seed = 77;
  std::stringstream io;
  run.write(io);
  const RunConfig back = RunConfig::parse(io);
  CHECK(back.to_pairs() == run.to_pairs());
  CHECK(back.model == run.model);

  const fs::path path = run.out_dir / "run.txt";
  {
    std::ofstream out(path);
    run.write(out);
  }
  CHECK(RunConfig::load(path).to_pairs() == run.to_pairs());
}

TEST_CASE("run config parsing") {
  SUBCASE("preset is applied first") {
    std::istringstream in("hidden = 32   # wider\n\n# comment\npreset = micro\n");
    const RunConfig run = RunConfig::parse(in);
    CHECK(run.model.hidden == 32);
    CHECK(run.model.layers == ModelConfig::preset("micro").layers);
  }
  SUBCASE("unknown keys are rejected") {
    std::istringstream in("preset = nano\nlearning_rate = 1\n");
    CHECK_THROWS_AS(RunConfig::parse(in), ConfigError);
  }
  SUBCASE("duplicate keys are rejected") {
    std::istringstream in("steps = 3\nsteps = 4\n");
    CHECK_THROWS_AS(RunConfig::parse(in), ConfigError);
  }
  SUBCASE("malformed lines and values") {
    std::istringstream no_eq("steps 3\n");
    CHECK_THROWS_AS(RunConfig::parse(no_eq), ConfigError);
    std::istringstream bad_value("steps = many\n");
    CHECK_THROWS_AS(RunConfig::parse(bad_value), ConfigError);
    std::istringstream bad_task("task = mnist\n");
    CHECK_THROWS_AS(RunConfig::parse(bad_task), ConfigError);
  }
  SUBCASE("inconsistent data and model") {
    RunConfig run;
    run.apply("vocab", "4");
    run.apply("task", "column_stripe");
    CHECK_NOTHROW(run.validate());
    run.apply("grid_width", "5");
    run.apply("task", "blockworld");
    CHECK_THROWS_AS(run.validate(), ConfigError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(RunConfig::load("/nonexistent/run.txt"), Error); }
}

TEST_CASE("train and eval sets do not overlap") {
  const RunConfig run = small_run("split");
  const auto train = run.train_grids();
  const auto eval = run.eval_grids();
  CHECK(train.size() == 64);
  CHECK(eval.size() == 16);
  CHECK(eval[0] == generate_one(run.data_spec(), 64));
}

TEST_CASE("output directory from the environment") {
  const char* saved = std::getenv(kOutDirEnv);
  const std::string keep = saved ? saved : "";
  setenv(kOutDirEnv, "/tmp/lasad_env_dir", 1);
  CHECK(default_out_dir() == fs::path("/tmp/lasad_env_dir"));
  setenv(kOutDirEnv, "", 1);
  CHECK(default_out_dir() == fs::path("runs"));
  if (saved) setenv(kOutDirEnv, keep.c_str(), 1);
  else unsetenv(kOutDirEnv);
}

TEST_CASE("train run artifacts and determinism") {
  RunConfig a = small_run("train_a");
  RunConfig b = small_run("train_b");
  const TrainRunResult ra = run_train(a, std::nullopt);
  const TrainRunResult rb = run_train(b, std::nullopt);
  REQUIRE(ra.trace.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(ra.trace[i].loss == rb.trace[i].loss);
  CHECK(ra.eval_loss == rb.eval_loss);
  CHECK(fs::exists(a.out_dir / "checkpoint.lasd"));
  CHECK(fs::exists(a.out_dir / "config.txt"));
  CHECK(RunConfig::load(a.out_dir / "config.txt").to_pairs() == a.to_pairs());

  std::ifstream trace_in(ra.trace_csv);
  const auto rows = read_trace(trace_in);
  REQUIRE(rows.size() == 10);
  CHECK(rows.back().step == 10);
  CHECK(rows.back().loss == ra.trace.back().loss);

  const Checkpoint ck = load_checkpoint(ra.checkpoint);
  CHECK(ck.step == 10);
  CHECK(ck.config == a.model);
}

TEST_CASE("resume continues the trace exactly") {
  RunConfig whole = small_run("resume_whole");
  const TrainRunResult full = run_train(whole, std::nullopt);

  RunConfig part = small_run("resume_part");
  part.steps = 4;
  run_train(part, std::nullopt);
  part.steps = 10;
  const TrainRunResult rest = run_train(part, part.out_dir / "checkpoint.lasd");
  REQUIRE(rest.trace.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(rest.trace[i].step == full.trace[i + 4].step);
    CHECK(rest.trace[i].loss == full.trace[i + 4].loss);
  }
  CHECK(rest.eval_loss == full.eval_loss);
  std::ifstream trace_in(rest.trace_csv);
  CHECK(read_trace(trace_in).size() == 10);

  RunConfig other = small_run("resume_other");
  other.model.hidden = 32;
  CHECK_THROWS_AS(run_train(other, part.out_dir / "checkpoint.lasd"), ConfigError);
  CHECK_THROWS_AS(run_train(other, other.out_dir / "missing.lasd"), LoadError);
}

TEST_CASE("nano model learns row_copy") {
  RunConfig run = small_run("learn");
  run.model = ModelConfig::preset("nano");
  run.steps = 1000;
  run.train_count = 4096;
  run.eval_count = 256;
  const TrainRunResult r = run_train(run, std::nullopt);
  CHECK(r.trace.back().loss < 0.5 * std::log(double(run.model.vocab)));
  CHECK(r.eval_loss < 0.5 * std::log(double(run.model.vocab)));
}

TEST_CASE("sample runs") {
  RunConfig run = small_run("sample");
  run.steps = 0;
  run_train(run, std::nullopt);
  SampleRunOptions o;
  o.checkpoint = run.out_dir / "checkpoint.lasd";
  o.label = 1;
  o.count = 4;
  o.sampling.top_k = 1;
  o.out = run.out_dir / "greedy_a.txt";
  o.pgm = run.out_dir / "greedy.pgm";

  SUBCASE("greedy decode twice gives identical files") {
    run_sample(o);
    o.out = run.out_dir / "greedy_b.txt";
    o.pgm.reset();
    run_sample(o);
    std::ifstream fa(run.out_dir / "greedy_a.txt"), fb(run.out_dir / "greedy_b.txt");
    const std::string ta((std::istreambuf_iterator<char>(fa)), {});
    const std::string tb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(!ta.empty());
    CHECK(ta == tb);
    CHECK(fs::file_size(run.out_dir / "greedy.pgm") == std::string("P5\n4 16\n255\n").size() + 64);
  }
  SUBCASE("untrained model samples are roughly uniform") {
    o.sampling.top_k = 0;
    o.count = 128;
    o.out = run.out_dir / "uniform.txt";
    const auto grids = run_sample(o);
    const auto read = load_token_grids(o.out, 4, 4, 8);
    CHECK(read == grids);
    std::vector<double> hist(8, 0.0);
    for (const auto& g : grids) {
      CHECK(g.label == 1);
      for (int t : g.tokens) hist[std::size_t(t)] += 1.0;
    }
    const double expected = 128.0 * 16.0 / 8.0;
    double chi2 = 0.0;
    for (double h : hist) chi2 += (h - expected) * (h - expected) / expected;
    CHECK(chi2 < 24.32);  // chi-square, 7 degrees of freedom, p = 0.001
  }
  SUBCASE("seeds shift per sample") {
    o.sampling.top_k = 0;
    o.count = 2;
    o.out = run.out_dir / "seeds.txt";
    const auto grids = run_sample(o);
    const Model model = restore_model(load_checkpoint(o.checkpoint));
    SampleOptions second = o.sampling;
    second.seed += 1;
    CHECK(grids[1] == sample(model, 1, second));
  }
  SUBCASE("errors") {
    o.checkpoint = run.out_dir / "nothing.lasd";
    CHECK_THROWS_AS(run_sample(o), LoadError);
    o.checkpoint = run.out_dir / "checkpoint.lasd";
    o.label = 9;
    CHECK_THROWS_AS(run_sample(o), InputError);
  }
}

TEST_CASE("guidance raises rule compliance on row_shift") {
  RunConfig run = small_run("guidance");
  run.model = ModelConfig::preset("nano");
  run.task = Task::row_shift;
  run.train_count = 32768;
  run.eval_count = 64;
  run.optimizer.lr = 1e-3;
  run.batch = 16;
  run.steps = 1500;
  run_train(run, std::nullopt);

  SampleRunOptions o;
  o.checkpoint = run.out_dir / "checkpoint.lasd";
  o.count = 100;
  std::vector<TokenGrid> plain, guided;
  for (int label = 0; label < 3; ++label) {
    o.label = label;
    o.sampling.seed = std::uint64_t(1000 * label);
    o.sampling.cfg_scale = 0.0;
    o.out = run.out_dir / "plain.txt";
    for (auto& g : run_sample(o)) plain.push_back(g);
    o.sampling.cfg_scale = 4.0;
    o.out = run.out_dir / "guided.txt";
    for (auto& g : run_sample(o)) guided.push_back(g);
  }
  const double p = shift_compliance(plain, 3);
  const double g = shift_compliance(guided, 3);
  MESSAGE("row_shift compliance: s=0 " << p << ", s=4 " << g);
  CHECK(g > p);
}

TEST_CASE("benchmark report") {
  BenchOptions o;
  o.mechanisms = bench_mechanisms();
  o.n_list = {16, 32, 64, 128, 256};
  o.dim = 8;
  o.repeats = 5;
  const BenchReport report = run_bench(o);
  CHECK(report.rows.size() == o.mechanisms.size() * 5);
  CHECK(report.slopes.size() == o.mechanisms.size());
  for (const BenchRow& row : report.rows) {
    CHECK(row.mean_seconds > 0.0);
    CHECK(row.std_seconds >= 0.0);
  }

  SUBCASE("recurrent state does not grow with N") {
    std::size_t first = 0;
    for (const BenchRow& row : report.rows) {
      if (row.mechanism != "lasad_recurrent") continue;
      if (first == 0) first = row.state_bytes;
      CHECK(row.state_bytes == first);
    }
    CHECK(first == std::size_t(8 * 8) * sizeof(double));
  }
  SUBCASE("csv round trip") {
    std::stringstream io;
    write_bench_csv(io, report);
    const auto rows = read_bench_csv(io);
    REQUIRE(rows.size() == report.rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CHECK(rows[i].mechanism == report.rows[i].mechanism);
      CHECK(rows[i].n == report.rows[i].n);
      CHECK(rows[i].mean_seconds == report.rows[i].mean_seconds);
      CHECK(rows[i].state_bytes == report.rows[i].state_bytes);
    }
  }
  SUBCASE("option errors") {
    BenchOptions bad = o;
    bad.repeats = 4;
    CHECK_THROWS_AS(run_bench(bad), ConfigError);
    bad = o;
    bad.n_list = {64, 32, 128, 256, 512};
    CHECK_THROWS_AS(run_bench(bad), ConfigError);
    bad = o;
    bad.mechanisms = {"flash"};
    CHECK_THROWS_AS(run_bench(bad), ConfigError);
  }
  SUBCASE("too few sizes give no slope") {
    BenchOptions few = o;
    few.mechanisms = {"linear_recurrent"};
    few.n_list = {16, 32, 64};
    const BenchReport r = run_bench(few);
    CHECK(r.slopes.empty());
    CHECK(std::isnan(r.slope("linear_recurrent")));
  }
}

TEST_CASE("log-log slope") {
  const std::vector<double> x{1, 2, 4, 8, 16};
  std::vector<double> y;
  for (double v : x) y.push_back(3.0 * v * v);
  CHECK(loglog_slope(x, y) == doctest::Approx(2.0).epsilon(1e-12));
  for (double& v : y) v = 5.0;
  CHECK(loglog_slope(x, y) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("verify suites") {
  const auto checks = run_verify("sad");
  CHECK(!checks.empty());
  for (const auto& c : checks) {
    CAPTURE(c.property);
    CHECK(c.scope == "sad");
    CHECK(c.pass);
  }
  CHECK_THROWS_AS(run_verify("everything"), UsageError);
}

TEST_CASE("removing the decay clamp is caught") {
  const auto checks = run_verify("numerics", Fault::no_clamp);
  bool caught = false;
  for (const auto& c : checks) caught = caught || !c.pass;
  CHECK(caught);
  std::ostringstream out;
  print_checks(out, checks);
  CHECK(out.str().find("FAIL") != std::string::npos);
}

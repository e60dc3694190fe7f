#pragma once

// Command-level plumbing: run configuration, training and sampling runs,
// scaling benchmarks and the verification suites.
//
// Config file format: flat UTF-8 `key = value` lines; '#' starts a comment.
// `preset` is applied before every other key regardless of its position.

#include "lasad/checkpoint.hpp"
#include "lasad/data.hpp"
#include "lasad/model.hpp"
#include "lasad/train.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace lasad {

/// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "LASAD_OUT_DIR";
/// $LASAD_OUT_DIR if set and non-empty, else "runs".
std::filesystem::path default_out_dir();

struct RunConfig {
  std::string preset = "nano";
  ModelConfig model = ModelConfig::preset("nano");
  Task task = Task::row_copy;
  std::int64_t train_count = 1024;
  std::int64_t eval_count = 256;
  std::uint64_t data_seed = 1;
  OptimizerConfig optimizer;
  int batch = 16;
  std::int64_t steps = 1000;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = default_out_dir();
  std::int64_t log_every = 100;

  /// Training grids are stream indices [0, train_count); evaluation grids
  /// follow them, so the two sets never overlap.
  SyntheticSpec data_spec() const;
  std::vector<TokenGrid> train_grids() const;
  std::vector<TokenGrid> eval_grids() const;

  /// Applies one key; throws ConfigError for unknown keys or bad values.
  void apply(std::string_view key, std::string_view value);
  void validate() const;
  /// Every key in a fixed order; parse(to_pairs()) reproduces the config.
  std::vector<std::pair<std::string, std::string>> to_pairs() const;

  static RunConfig parse(std::istream& in);
  static RunConfig load(const std::filesystem::path& path);
  void write(std::ostream& out) const;
};

struct TrainRunResult {
  std::vector<TraceRow> trace;  ///< rows produced by this invocation
  double eval_loss = 0.0;
  double floor_loss = 0.0;
  std::filesystem::path checkpoint, trace_csv;
};

/// Trains up to `run.steps` total steps and writes `checkpoint.lasd`,
/// `trace.csv` and `config.txt` under run.out_dir. With `resume`, model and
/// optimizer state are restored from that checkpoint and the trace file is
/// appended to. Progress lines go to `log` when given.
TrainRunResult run_train(const RunConfig& run, const std::optional<std::filesystem::path>& resume,
                         std::ostream* log = nullptr);

struct SampleRunOptions {
  std::filesystem::path checkpoint;
  int label = 0;
  int count = 1;
  SampleOptions sampling;
  std::filesystem::path out;           ///< token-grid file
  std::optional<std::filesystem::path> pgm;  ///< grids stacked vertically
};

/// Sample i of `count` uses seed sampling.seed + i.
std::vector<TokenGrid> run_sample(const SampleRunOptions& options);

// ---------------------------------------------------------------------------
// Benchmarks

struct BenchOptions {
  /// lasad_recurrent, hgrn2_recurrent, linear_recurrent, lasad_chunked, softmax.
  std::vector<std::string> mechanisms = {"lasad_recurrent", "softmax"};
  std::vector<int> n_list = {256, 512, 1024, 2048, 4096, 8192};
  int dim = 64;
  int repeats = 5;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::string mechanism;
  int n = 0;
  double mean_seconds = 0.0;  ///< whole sequence
  double std_seconds = 0.0;
  double per_step_seconds = 0.0;
  std::size_t state_bytes = 0;  ///< peak live attention state
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::vector<std::pair<std::string, double>> slopes;  ///< log-log fit of mean_seconds on n

  double slope(std::string_view mechanism) const;
};

std::vector<std::string> bench_mechanisms();
/// Recurrent mechanisms are timed as N sequential decode steps; softmax as
/// one causal full-sequence pass, computed in row blocks.
BenchReport run_bench(const BenchOptions& options);
/// Least-squares slope of log(y) on log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

void write_bench_csv(std::ostream& out, const BenchReport& report);
std::vector<BenchRow> read_bench_csv(std::istream& in);

// ---------------------------------------------------------------------------
// Verification

enum class Fault { none, no_clamp };

struct CheckResult {
  std::string scope;
  std::string property;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

/// numerics, attention, sad, model, all.
std::vector<std::string> verify_scopes();
/// Runs the invariant suites of `scope`. `fault` deliberately breaks the
/// library path it names so the suites can be seen to catch it.
std::vector<CheckResult> run_verify(std::string_view scope, Fault fault = Fault::none);
void print_checks(std::ostream& out, std::span<const CheckResult> checks);

}  // namespace lasad

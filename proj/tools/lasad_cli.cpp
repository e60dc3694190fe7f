// lasad: verify, train, sample, bench and generate.
//
// Exit codes: 0 on full success, 1 on a failed check or runtime error,
// 2 on bad usage.

#include "lasad/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

using namespace lasad;

int cmd_verify(const std::string& scope, const std::string& fault_name) {
  Fault fault = Fault::none;
  if (fault_name == "no-clamp") {
    fault = Fault::no_clamp;
  } else if (!fault_name.empty()) {
    throw UsageError("unknown fault '" + fault_name + "' (no-clamp)");
  }
  const auto checks = run_verify(scope, fault);
  print_checks(std::cout, checks);
  std::size_t failed = 0;
  for (const auto& c : checks) failed += c.pass ? 0 : 1;
  std::cout << (checks.size() - failed) << "/" << checks.size() << " checks passed\n";
  return failed == 0 ? 0 : 1;
}

int cmd_train(const std::string& config, const std::string& resume, const std::vector<std::string>& overrides,
              const std::string& out_dir) {
  RunConfig run = config.empty() ? RunConfig() : RunConfig::load(config);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    run.apply(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!out_dir.empty()) run.out_dir = out_dir;
  run.validate();
  std::optional<std::filesystem::path> resume_path;
  if (!resume.empty()) resume_path = resume;
  run_train(run, resume_path, &std::cout);
  return 0;
}

int cmd_bench(const BenchOptions& options, const std::string& out) {
  const BenchReport report = run_bench(options);
  if (!out.empty()) {
    std::ofstream file(out);
    if (!file) throw Error("cannot open '" + out + "' for writing");
    write_bench_csv(file, report);
  }
  write_bench_csv(std::cout, report);
  return 0;
}

int cmd_generate(const SyntheticSpec& spec, const std::string& out) {
  const auto grids = generate(spec);
  if (out.empty()) {
    write_token_grids(std::cout, grids);
  } else {
    save_token_grids(out, grids);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Linear attention with spatial-aware decay: verification, training, sampling, benchmarks"};
  app.require_subcommand(1);

  std::string scope = "all", fault;
  auto* verify = app.add_subcommand("verify", "Run the invariant suites");
  verify->add_option("--scope", scope, "numerics, attention, sad, model or all")
      ->check(CLI::IsMember(verify_scopes()));
  verify->add_option("--inject-fault", fault, "Deliberately break a library path (no-clamp)");

  std::string config, resume, out_dir;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "Train on a synthetic task");
  train->add_option("--config", config, "Run config file (key = value lines)");
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--set", overrides, "Override a config key (key=value), repeatable");
  train->add_option("--out-dir", out_dir, std::string("Output directory (default $") + kOutDirEnv + " or runs)");

  SampleRunOptions sample_opts;
  std::string sample_out, pgm;
  auto* sample = app.add_subcommand("sample", "Sample token grids from a checkpoint");
  sample->add_option("--ckpt", sample_opts.checkpoint, "Checkpoint file")->required();
  sample->add_option("--label", sample_opts.label, "Class label; the class count means unconditional")->required();
  sample->add_option("--cfg-scale", sample_opts.sampling.cfg_scale, "Guidance scale s >= 0");
  sample->add_option("--seed", sample_opts.sampling.seed, "Sampling seed");
  sample->add_option("--temperature", sample_opts.sampling.temperature, "Softmax temperature; <= 0 is greedy");
  sample->add_option("--top-k", sample_opts.sampling.top_k, "Keep the k most likely tokens; 0 keeps all");
  sample->add_option("--count", sample_opts.count, "Number of grids");
  sample->add_option("--out", sample_out, "Token-grid output file (default <out dir>/samples.txt)");
  sample->add_option("--pgm", pgm, "Also write a PGM raster of the dequantized grids");

  BenchOptions bench_opts;
  std::string bench_out;
  auto* bench = app.add_subcommand("bench", "Time attention mechanisms against sequence length");
  bench->add_option("--mechanisms", bench_opts.mechanisms, "Mechanisms to time")
      ->delimiter(',')
      ->check(CLI::IsMember(bench_mechanisms()));
  bench->add_option("--n-list", bench_opts.n_list, "Ascending sequence lengths")->delimiter(',');
  bench->add_option("--d", bench_opts.dim, "Head dimension");
  bench->add_option("--repeats", bench_opts.repeats, "Timed repeats per length (>= 5)");
  bench->add_option("--seed", bench_opts.seed, "Input seed");
  bench->add_option("--out", bench_out, "CSV output file");

  SyntheticSpec spec;
  std::string task = "row_copy", gen_out;
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset as a token-grid file");
  gen->add_option("--task", task, "row_copy, row_shift, column_stripe or blockworld");
  gen->add_option("--height", spec.height, "Grid height");
  gen->add_option("--width", spec.width, "Grid width");
  gen->add_option("--vocab", spec.vocab, "Vocabulary size");
  gen->add_option("--classes", spec.classes, "Number of classes");
  gen->add_option("--count", spec.count, "Number of grids");
  gen->add_option("--seed", spec.seed, "Dataset seed");
  gen->add_option("--out", gen_out, "Output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*verify) return cmd_verify(scope, fault);
    if (*train) return cmd_train(config, resume, overrides, out_dir);
    if (*sample) {
      sample_opts.out = sample_out.empty() ? default_out_dir() / "samples.txt" : std::filesystem::path(sample_out);
      if (!pgm.empty()) sample_opts.pgm = pgm;
      if (sample_opts.out.has_parent_path()) std::filesystem::create_directories(sample_opts.out.parent_path());
      const auto grids = run_sample(sample_opts);
      std::cout << "wrote " << grids.size() << " grid(s) to " << sample_opts.out.string() << '\n';
      return 0;
    }
    if (*bench) return cmd_bench(bench_opts, bench_out);
    if (*gen) {
      spec.task = parse_task(task);
      return cmd_generate(spec, gen_out);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

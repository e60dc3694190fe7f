#include "lasad/config_text.hpp"
#include "lasad/harness.hpp"

#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

namespace lasad {

std::filesystem::path default_out_dir() {
  const char* env = std::getenv(kOutDirEnv);
  if (env != nullptr && *env != '\0') return env;
  return "runs";
}

SyntheticSpec RunConfig::data_spec() const {
  return SyntheticSpec{task, model.grid_height, model.grid_width, model.vocab, model.classes,
                       train_count + eval_count, data_seed};
}

std::vector<TokenGrid> RunConfig::train_grids() const {
  const SyntheticSpec spec = data_spec();
  spec.validate();
  std::vector<TokenGrid> out;
  for (std::int64_t i = 0; i < train_count; ++i) out.push_back(generate_one(spec, i));
  return out;
}

std::vector<TokenGrid> RunConfig::eval_grids() const {
  const SyntheticSpec spec = data_spec();
  spec.validate();
  std::vector<TokenGrid> out;
  for (std::int64_t i = 0; i < eval_count; ++i) out.push_back(generate_one(spec, train_count + i));
  return out;
}

void RunConfig::apply(std::string_view key, std::string_view value) {
  if (key == "preset") {
    model = ModelConfig::preset(value);
    preset = std::string(value);
  } else if (model.apply(key, value)) {
  } else if (key == "task") task = parse_task(value);
  else if (key == "train_count") train_count = parse_number<std::int64_t>(key, value);
  else if (key == "eval_count") eval_count = parse_number<std::int64_t>(key, value);
  else if (key == "data_seed") data_seed = parse_number<std::uint64_t>(key, value);
  else if (key == "lr") optimizer.lr = parse_number<double>(key, value);
  else if (key == "beta1") optimizer.beta1 = parse_number<double>(key, value);
  else if (key == "beta2") optimizer.beta2 = parse_number<double>(key, value);
  else if (key == "weight_decay") optimizer.weight_decay = parse_number<double>(key, value);
  else if (key == "adam_eps") optimizer.eps = parse_number<double>(key, value);
  else if (key == "grad_clip") optimizer.max_grad_norm = parse_number<double>(key, value);
  else if (key == "batch") batch = parse_number<int>(key, value);
  else if (key == "steps") steps = parse_number<std::int64_t>(key, value);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
  else if (key == "out_dir") out_dir = std::string(value);
  else if (key == "log_every") log_every = parse_number<std::int64_t>(key, value);
  else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void RunConfig::validate() const {
  model.validate();
  data_spec().validate();
  if (train_count < 1) throw ConfigError("train_count must be >= 1");
  if (eval_count < 1) throw ConfigError("eval_count must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(optimizer.lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (optimizer.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(optimizer.eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (log_every < 0) throw ConfigError("log_every must be >= 0");
}

std::vector<std::pair<std::string, std::string>> RunConfig::to_pairs() const {
  std::vector<std::pair<std::string, std::string>> out{{"preset", preset}};
  for (auto& kv : model.to_pairs()) out.push_back(std::move(kv));
  out.insert(out.end(), {
                            {"task", to_string(task)},
                            {"train_count", std::to_string(train_count)},
                            {"eval_count", std::to_string(eval_count)},
                            {"data_seed", std::to_string(data_seed)},
                            {"lr", format_double(optimizer.lr)},
                            {"beta1", format_double(optimizer.beta1)},
                            {"beta2", format_double(optimizer.beta2)},
                            {"weight_decay", format_double(optimizer.weight_decay)},
                            {"adam_eps", format_double(optimizer.eps)},
                            {"grad_clip", format_double(optimizer.max_grad_norm)},
                            {"batch", std::to_string(batch)},
                            {"steps", std::to_string(steps)},
                            {"seed", std::to_string(seed)},
                            {"out_dir", out_dir.string()},
                            {"log_every", std::to_string(log_every)},
                        });
  return out;
}

RunConfig RunConfig::parse(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::set<std::string, std::less<>> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view body = line;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    body = trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key(trim(body.substr(0, eq)));
    std::string value(trim(body.substr(eq + 1)));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    pairs.emplace_back(std::move(key), std::move(value));
  }

  RunConfig run;
  for (const auto& [k, v] : pairs) {
    if (k == "preset") run.apply(k, v);
  }
  for (const auto& [k, v] : pairs) {
    if (k != "preset") run.apply(k, v);
  }
  run.validate();
  return run;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  return parse(in);
}

void RunConfig::write(std::ostream& out) const {
  for (const auto& [k, v] : to_pairs()) out << k << " = " << v << '\n';
}

TrainRunResult run_train(const RunConfig& run, const std::optional<std::filesystem::path>& resume, std::ostream* log) {
  run.validate();
  std::filesystem::create_directories(run.out_dir);
  TrainRunResult result;
  result.checkpoint = run.out_dir / "checkpoint.lasd";
  result.trace_csv = run.out_dir / "trace.csv";

  std::optional<Model> model;
  AdamW optimizer;
  if (resume) {
    const Checkpoint ck = load_checkpoint(*resume);
    if (!(ck.config == run.model)) throw ConfigError("resume: checkpoint model config differs from the run config");
    model.emplace(restore_model(ck));
    auto restored = restore_optimizer(ck, *model, run.optimizer);
    if (!restored) throw LoadError("resume: checkpoint carries no optimizer state");
    optimizer = std::move(*restored);
  } else {
    model.emplace(run.model, run.seed);
    optimizer = AdamW(*model, run.optimizer);
  }

  std::ofstream trace_out(result.trace_csv, resume ? std::ios::app : std::ios::trunc);
  if (!trace_out) throw Error("cannot open '" + result.trace_csv.string() + "' for writing");
  if (!resume) write_trace_header(trace_out);
  {
    std::ofstream config_out(run.out_dir / "config.txt");
    run.write(config_out);
  }

  const auto train_set = run.train_grids();
  const auto eval_set = run.eval_grids();
  TrainOptions options;
  options.optimizer = run.optimizer;
  options.batch = run.batch;
  options.steps = std::max<std::int64_t>(0, run.steps - optimizer.steps());
  options.seed = run.seed;
  options.on_step = [&](const TraceRow& row) {
    write_trace_row(trace_out, row);
    if (log != nullptr && run.log_every > 0 && (row.step % run.log_every == 0 || row.step == run.steps)) {
      *log << "step " << row.step << " loss " << row.loss << " (" << row.seconds << " s)\n";
    }
  };
  result.trace = train(*model, optimizer, train_set, options);
  trace_out.flush();

  save_checkpoint(make_checkpoint(*model, &optimizer, optimizer.steps(), run.seed), result.checkpoint);
  result.eval_loss = evaluate(*model, eval_set);
  result.floor_loss = floor_loss(run.data_spec());
  if (log != nullptr) {
    *log << "eval loss " << result.eval_loss << " (task floor " << result.floor_loss << ")\n"
         << "wrote " << result.checkpoint.string() << " and " << result.trace_csv.string() << '\n';
  }
  return result;
}

std::vector<TokenGrid> run_sample(const SampleRunOptions& options) {
  if (options.count < 1) throw InputError("sample: count must be >= 1");
  const Checkpoint ck = load_checkpoint(options.checkpoint);
  const Model model = restore_model(ck);
  std::vector<TokenGrid> grids;
  for (int i = 0; i < options.count; ++i) {
    SampleOptions s = options.sampling;
    s.seed = options.sampling.seed + std::uint64_t(i);
    grids.push_back(sample(model, options.label, s));
  }
  if (!options.out.empty()) save_token_grids(options.out, grids);
  if (options.pgm) {
    Image stacked{0, ck.config.grid_width, {}};
    for (const TokenGrid& g : grids) {
      const Image img = dequantize(g, ck.config.vocab);
      stacked.height += img.height;
      stacked.pixels.insert(stacked.pixels.end(), img.pixels.begin(), img.pixels.end());
    }
    write_pgm(*options.pgm, stacked);
  }
  return grids;
}

}  // namespace lasad

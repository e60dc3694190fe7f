#include "lasad/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lasad {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  template <typename T>
  T get(const std::string& what) {
    T value;
    need(sizeof(T), what);
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string str(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void read_doubles(double* dst, std::size_t count, const std::string& what) {
    need(count * sizeof(double), what);
    std::memcpy(dst, bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
  }

 private:
  void need(std::size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n) throw LoadError("checkpoint truncated while reading " + what);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Matrix* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return &m;
  }
  return nullptr;
}

Checkpoint make_checkpoint(const Model& model, const AdamW* optimizer, std::int64_t step, std::uint64_t seed) {
  Checkpoint ck{model.config(), {}, step, seed};
  for (const auto& p : model.parameters()) ck.tensors.emplace_back(p.name, p.tensor.data());
  if (optimizer != nullptr) {
    const auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      ck.tensors.emplace_back("opt.m/" + params[i].name, optimizer->first_moments()[i]);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      ck.tensors.emplace_back("opt.v/" + params[i].name, optimizer->second_moments()[i]);
    }
  }
  return ck;
}

Model restore_model(const Checkpoint& ck) {
  Model model(ck.config, 0);
  for (auto& p : model.parameters()) {
    const Matrix* m = ck.find(p.name);
    if (m == nullptr) throw LoadError("checkpoint is missing tensor '" + p.name + "'");
    if (m->rows() != p.tensor.rows() || m->cols() != p.tensor.cols()) {
      throw LoadError("tensor '" + p.name + "' has shape " + shape_string(m->rows(), m->cols()) + ", config implies " +
                      shape_string(p.tensor.rows(), p.tensor.cols()));
    }
    if (!m->allFinite()) throw LoadError("tensor '" + p.name + "' holds non-finite values");
    p.tensor.data() = *m;
  }
  for (const auto& [name, m] : ck.tensors) {
    if (name.rfind("opt.", 0) == 0) continue;
    bool known = false;
    for (const auto& p : model.parameters()) known = known || p.name == name;
    if (!known) throw LoadError("checkpoint holds unexpected tensor '" + name + "'");
  }
  return model;
}

std::optional<AdamW> restore_optimizer(const Checkpoint& ck, const Model& model, OptimizerConfig config) {
  AdamW opt(model, config);
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix* m = ck.find("opt.m/" + params[i].name);
    const Matrix* v = ck.find("opt.v/" + params[i].name);
    if (m == nullptr || v == nullptr) return std::nullopt;
    if (m->rows() != params[i].tensor.rows() || m->cols() != params[i].tensor.cols() || v->rows() != m->rows() ||
        v->cols() != m->cols()) {
      throw LoadError("optimizer moments for '" + params[i].name + "' do not match the parameter shape");
    }
    opt.first_moments()[i] = *m;
    opt.second_moments()[i] = *v;
  }
  opt.set_steps(ck.step);
  return opt;
}

std::string encode_checkpoint(const Checkpoint& ck) {
  std::string config;
  for (const auto& [k, v] : ck.config.to_pairs()) config += k + "=" + v + "\n";
  config += "step=" + std::to_string(ck.step) + "\n";
  config += "seed=" + std::to_string(ck.seed) + "\n";

  std::string out = "LASD";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, std::uint32_t(config.size()));
  out += config;
  for (const auto& [name, m] : ck.tensors) {
    put<std::uint32_t>(out, std::uint32_t(name.size()));
    out += name;
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, std::uint64_t(m.rows()));
    put<std::uint64_t>(out, std::uint64_t(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), std::size_t(m.size()) * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.str(4, "magic") != "LASD") throw LoadError("not a checkpoint: bad magic bytes");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw LoadError("unsupported checkpoint version " + std::to_string(version));
  const auto config_bytes = in.get<std::uint32_t>("config length");
  std::istringstream lines(in.str(config_bytes, "config"));

  Checkpoint ck;
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw LoadError("malformed config line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "step") {
        ck.step = std::stoll(value);
      } else if (key == "seed") {
        ck.seed = std::stoull(value);
      } else if (!ck.config.apply(key, value)) {
        throw LoadError("unknown config key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      throw LoadError(std::string("bad config: ") + e.what());
    } catch (const std::logic_error&) {
      throw LoadError("bad config value for '" + key + "'");
    }
  }
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw LoadError(std::string("bad config: ") + e.what());
  }

  while (!in.done()) {
    const auto name_len = in.get<std::uint32_t>("tensor name length");
    std::string name = in.str(name_len, "tensor name");
    const auto rank = in.get<std::uint32_t>("rank of '" + name + "'");
    if (rank < 1 || rank > 2) throw LoadError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    std::uint64_t dims[2] = {1, 1};
    for (std::uint32_t r = 0; r < rank; ++r) dims[2 - rank + r] = in.get<std::uint64_t>("dims of '" + name + "'");
    if (dims[0] > (1ULL << 32) || dims[1] > (1ULL << 32)) throw LoadError("tensor '" + name + "' has absurd dims");
    Matrix m(static_cast<Index>(dims[0]), static_cast<Index>(dims[1]));
    in.read_doubles(m.data(), std::size_t(m.size()), "payload of '" + name + "'");
    ck.tensors.emplace_back(std::move(name), std::move(m));
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return decode_checkpoint(buffer.str());
}

}  // namespace lasad

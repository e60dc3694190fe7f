#include "lasad/data.hpp"

#include "lasad/config_text.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

namespace lasad {

std::string to_string(Task task) {
  switch (task) {
    case Task::row_copy: return "row_copy";
    case Task::row_shift: return "row_shift";
    case Task::column_stripe: return "column_stripe";
    case Task::blockworld: return "blockworld";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  for (Task t : {Task::row_copy, Task::row_shift, Task::column_stripe, Task::blockworld}) {
    if (to_string(t) == name) return t;
  }
  throw ConfigError("unknown task '" + std::string(name) + "' (row_copy, row_shift, column_stripe, blockworld)");
}

void SyntheticSpec::validate() const {
  if (height < 1 || width < 1) throw ConfigError("grid must be at least 1x1, got " + shape_string(height, width));
  if (vocab < 2) throw ConfigError("vocab must be >= 2, got " + std::to_string(vocab));
  if (classes < 1) throw ConfigError("classes must be >= 1, got " + std::to_string(classes));
  if (count < 0) throw ConfigError("count must be >= 0");
  if (task == Task::row_shift && width < 2) throw ConfigError("row_shift needs width >= 2");
  if (task == Task::blockworld && (height % 2 != 0 || width % 2 != 0)) {
    throw ConfigError("blockworld needs even grid dimensions, got " + shape_string(height, width));
  }
}

namespace {

std::uint64_t grid_seed(std::uint64_t seed, std::int64_t index) {
  std::uint64_t z = seed ^ (0x9E3779B97F4A7C15ULL * std::uint64_t(index + 1));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

int row_shift_amount(const SyntheticSpec& spec, int label) { return 1 + label % (spec.width - 1); }

/// Whether image token t (0-based) is drawn fresh rather than copied.
bool is_free_position(const SyntheticSpec& spec, int t) {
  const int r = t / spec.width, c = t % spec.width;
  switch (spec.task) {
    case Task::row_copy: return c == 0;
    case Task::row_shift:
    case Task::column_stripe: return r == 0;
    case Task::blockworld: return r % 2 == 0 && c % 2 == 0;
  }
  return true;
}

/// The token a copied position must hold.
int copied_token(const SyntheticSpec& spec, const TokenGrid& g, int t) {
  const int r = t / spec.width, c = t % spec.width, w = spec.width;
  switch (spec.task) {
    case Task::row_copy: return g.at(r, 0);
    case Task::row_shift: return g.at(r - 1, ((c - row_shift_amount(spec, g.label)) % w + w) % w);
    case Task::column_stripe: return g.at(r - 1, c);
    case Task::blockworld: return g.at(r - r % 2, c - c % 2);
  }
  return 0;
}

}  // namespace

TokenGrid generate_one(const SyntheticSpec& spec, std::int64_t index) {
  spec.validate();
  std::mt19937_64 rng(grid_seed(spec.seed, index));
  std::uniform_int_distribution<int> token(0, spec.vocab - 1);
  std::uniform_int_distribution<int> label(0, spec.classes - 1);
  TokenGrid g{spec.height, spec.width, std::vector<int>(std::size_t(spec.height * spec.width)), label(rng)};
  for (int t = 0; t < g.size(); ++t) {
    g.tokens[std::size_t(t)] = is_free_position(spec, t) ? token(rng) : copied_token(spec, g, t);
  }
  return g;
}

std::vector<TokenGrid> generate(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<TokenGrid> out;
  out.reserve(std::size_t(spec.count));
  for (std::int64_t i = 0; i < spec.count; ++i) out.push_back(generate_one(spec, i));
  return out;
}

std::vector<double> bayes_predict(const SyntheticSpec& spec, const TokenGrid& grid, int t) {
  if (t < 0 || t >= grid.size()) throw InputError("bayes_predict: position " + std::to_string(t) + " out of range");
  std::vector<double> p(std::size_t(spec.vocab), 0.0);
  if (is_free_position(spec, t)) {
    std::fill(p.begin(), p.end(), 1.0 / spec.vocab);
  } else {
    p[std::size_t(copied_token(spec, grid, t))] = 1.0;
  }
  return p;
}

double bayes_loss(const SyntheticSpec& spec, const TokenGrid& grid) {
  double total = 0.0;
  for (int t = 0; t < grid.size(); ++t) {
    total -= std::log(bayes_predict(spec, grid, t)[std::size_t(grid.tokens[std::size_t(t)])]);
  }
  return total / grid.size();
}

double floor_loss(const SyntheticSpec& spec) {
  spec.validate();
  int free = 0;
  for (int t = 0; t < spec.height * spec.width; ++t) free += is_free_position(spec, t) ? 1 : 0;
  return std::log(double(spec.vocab)) * free / (spec.height * spec.width);
}

TokenGrid quantize_image(const Image& image, int patch, int levels, int label) {
  if (patch < 1) throw InputError("quantize_image: patch must be >= 1");
  if (levels < 2) throw InputError("quantize_image: levels must be >= 2");
  if (image.height < 1 || image.width < 1 ||
      image.pixels.size() != std::size_t(image.height) * std::size_t(image.width)) {
    throw InputError("quantize_image: pixel buffer does not match " + shape_string(image.height, image.width));
  }
  if (image.height % patch != 0 || image.width % patch != 0) {
    throw InputError("quantize_image: " + shape_string(image.height, image.width) + " is not divisible by patch " +
                     std::to_string(patch));
  }
  for (double v : image.pixels) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("quantize_image: pixel values must lie in [0, 1]");
  }
  TokenGrid g{image.height / patch, image.width / patch, {}, label};
  g.tokens.reserve(std::size_t(g.size()));
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) {
      double sum = 0.0;
      for (int i = 0; i < patch; ++i) {
        for (int j = 0; j < patch; ++j) sum += image.at(r * patch + i, c * patch + j);
      }
      const double mean = sum / (patch * patch);
      g.tokens.push_back(std::min(levels - 1, int(std::floor(mean * levels))));
    }
  }
  return g;
}

Image dequantize(const TokenGrid& grid, int levels) {
  Image img{grid.height, grid.width, {}};
  img.pixels.reserve(grid.tokens.size());
  for (int t : grid.tokens) img.pixels.push_back((t + 0.5) / levels);
  return img;
}

void write_token_grids(std::ostream& out, std::span<const TokenGrid> grids) {
  for (const TokenGrid& g : grids) {
    out << g.label << ':';
    for (int t : g.tokens) out << ' ' << t;
    out << '\n';
  }
}

std::vector<TokenGrid> read_token_grids(std::istream& in, int height, int width, int vocab) {
  std::vector<TokenGrid> grids;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view body = trim(line);
    if (body.empty() || body[0] == '#') continue;
    const auto where = "line " + std::to_string(line_no) + ": ";
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw InputError(where + "expected 'label: t1 ... tN'");
    TokenGrid g{height, width, {}, 0};
    std::istringstream label_in(line.substr(0, colon));
    if (!(label_in >> g.label) || !(label_in >> std::ws).eof() || g.label < 0) {
      throw InputError(where + "bad label");
    }
    std::istringstream tokens_in(line.substr(colon + 1));
    int t = 0;
    while (tokens_in >> t) {
      if (t < 0 || t >= vocab) throw InputError(where + "token " + std::to_string(t) + " outside [0, vocab)");
      g.tokens.push_back(t);
    }
    if (!tokens_in.eof()) throw InputError(where + "non-numeric token");
    if (g.size() != int(g.tokens.size())) {
      throw InputError(where + std::to_string(g.tokens.size()) + " tokens, expected " + std::to_string(g.size()));
    }
    grids.push_back(std::move(g));
  }
  return grids;
}

void save_token_grids(const std::filesystem::path& path, std::span<const TokenGrid> grids) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  write_token_grids(out, grids);
}

std::vector<TokenGrid> load_token_grids(const std::filesystem::path& path, int height, int width, int vocab) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  return read_token_grids(in, height, width, vocab);
}

void write_pgm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  for (double v : image.pixels) {
    out.put(char(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
}

}  // namespace lasad

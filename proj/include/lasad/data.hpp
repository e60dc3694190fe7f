#pragma once

// Synthetic token-grid tasks and a toy grayscale tokenizer.
//
// Token-grid file format: one grid per line, `label: t1 t2 ... tN` in ASCII
// decimal, tokens in raster order. Blank lines and lines starting with '#'
// are ignored.

#include "lasad/common.hpp"
#include "lasad/token_grid.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lasad {

enum class Task {
  row_copy,       ///< each row repeats its first token
  row_shift,      ///< row r is row r-1 cyclically shifted right by 1 + label % (w-1)
  column_stripe,  ///< the first row is random; every later row repeats it
  blockworld,     ///< 2x2 blocks of one uniform random token
};

std::string to_string(Task task);
Task parse_task(std::string_view name);

struct SyntheticSpec {
  Task task = Task::row_copy;
  int height = 4;
  int width = 4;
  int vocab = 16;
  int classes = 4;
  std::int64_t count = 256;
  std::uint64_t seed = 0;

  /// Throws ConfigError for grid/vocab combinations the task cannot use.
  void validate() const;
};

/// Grid `index` of the stream; a pure function of (spec, index).
TokenGrid generate_one(const SyntheticSpec& spec, std::int64_t index);
/// Grids [0, spec.count).
std::vector<TokenGrid> generate(const SyntheticSpec& spec);

/// Bayes-optimal next-token distribution for image token t (0-based) given
/// the earlier tokens of `grid` and its label. Returns V probabilities.
std::vector<double> bayes_predict(const SyntheticSpec& spec, const TokenGrid& grid, int t);
/// Cross-entropy of bayes_predict on `grid`, averaged over the N positions.
double bayes_loss(const SyntheticSpec& spec, const TokenGrid& grid);
/// Closed-form expected per-position loss of the Bayes predictor.
double floor_loss(const SyntheticSpec& spec);

/// Grayscale image with values in [0, 1], row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  double at(int r, int c) const { return pixels[std::size_t(r) * std::size_t(width) + std::size_t(c)]; }
};

/// Mean-pools p x p patches and bins each mean uniformly into `levels` bins.
TokenGrid quantize_image(const Image& image, int patch, int levels, int label = 0);
/// Bin centres, one pixel per token.
Image dequantize(const TokenGrid& grid, int levels);

void write_token_grids(std::ostream& out, std::span<const TokenGrid> grids);
/// Every grid must hold height * width tokens in [0, vocab).
std::vector<TokenGrid> read_token_grids(std::istream& in, int height, int width, int vocab);

void save_token_grids(const std::filesystem::path& path, std::span<const TokenGrid> grids);
std::vector<TokenGrid> load_token_grids(const std::filesystem::path& path, int height, int width, int vocab);

/// Binary 8-bit PGM (P5) with each pixel scaled from [0, 1] to [0, 255].
void write_pgm(const std::filesystem::path& path, const Image& image);

}  // namespace lasad

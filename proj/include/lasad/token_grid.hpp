#pragma once

#include <vector>

namespace lasad {

/// An h x w grid of token ids in raster order plus its class label.
struct TokenGrid {
  int height = 0;
  int width = 0;
  std::vector<int> tokens;
  int label = 0;

  int size() const { return height * width; }
  int at(int row, int col) const { return tokens[std::size_t(row * width + col)]; }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

}  // namespace lasad

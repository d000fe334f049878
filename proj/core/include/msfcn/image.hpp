#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msfcn/error.hpp"

namespace msfcn {

/// Row-major 2-D array.
template <typename T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw_invalid("grid dimensions must be non-negative");
  }

  T& operator()(int r, int c) noexcept { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const noexcept {
    return data[static_cast<std::size_t>(r) * cols + c];
  }
  bool contains(int r, int c) const noexcept { return r >= 0 && r < rows && c >= 0 && c < cols; }
  std::size_t size() const noexcept { return data.size(); }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using Image = Grid<double>;
using Mask = Grid<std::uint8_t>;

/// Class indices used throughout.
enum Label : std::uint8_t { kBackground = 0, kMyocardium = 1, kCavity = 2 };

struct Spacing {
  double row_mm = 1.25;
  double col_mm = 1.25;
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// One labelled slice. `case_id` groups slices for per-case aggregation.
struct Sample {
  Image image;
  Mask mask;
  Spacing spacing;
  std::string id;
  std::string case_id;

  /// Throws unless image/mask agree in shape, labels are < classes and spacing > 0.
  void validate(int classes = 3) const;
};

}  // namespace msfcn

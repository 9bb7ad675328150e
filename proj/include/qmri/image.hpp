#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "qmri/error.hpp"

namespace qmri {

/// Row-major 2D array. Rows run along y (height), columns along x (width).
template <typename T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), data(h * w, fill) {}

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  T& operator()(std::size_t row, std::size_t col) { return data[row * width + col]; }
  const T& operator()(std::size_t row, std::size_t col) const { return data[row * width + col]; }

  bool same_shape(std::size_t h, std::size_t w) const { return height == h && width == w; }
  template <typename U>
  bool same_shape(const Grid<U>& other) const {
    return height == other.height && width == other.width;
  }

  bool operator==(const Grid&) const = default;
};

using Image = Grid<float>;
using Mask = Grid<std::uint8_t>;

template <typename A, typename B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                     " does not match " + std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

inline std::size_t mask_count(const Mask& mask) {
  std::size_t n = 0;
  for (auto m : mask.data) n += m != 0;
  return n;
}

}  // namespace qmri

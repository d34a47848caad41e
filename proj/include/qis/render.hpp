#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qis/grid.hpp"
#include "qis/image_io.hpp"

namespace qis {

namespace detail {

struct RgbCanvas {
  int height;
  int width;
  std::vector<std::uint8_t> px;

  void put(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    px[i] = r;
    px[i + 1] = g;
    px[i + 2] = b;
  }

  void line(Vec2 a, Vec2 b, std::uint8_t r, std::uint8_t g, std::uint8_t bl) {
    const int steps = static_cast<int>(std::ceil(std::max(std::abs(b.x - a.x), std::abs(b.y - a.y)))) + 1;
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      // Node coordinates are pixel corners; pixel (c, r) spans [c, c+1).
      put(static_cast<int>(std::floor(a.x + t * (b.x - a.x))), static_cast<int>(std::floor(a.y + t * (b.y - a.y))), r,
          g, bl);
    }
  }
};

}  // namespace detail

// Image in gray (clamped to 0..255), mask boundary in red, and every
// `spacing`-th node row and column of psi drawn in green.
inline std::string render_grid_overlay(const ScalarField& image, const DeformationField& psi, const BinaryMask& mask,
                                       int spacing = 8) {
  require_same_shape(image, mask, "render_grid_overlay");
  require_compatible(psi, image.height(), image.width());
  detail::RgbCanvas cv{image.height(), image.width(), std::vector<std::uint8_t>(image.size() * 3)};
  for (std::size_t i = 0; i < image.size(); ++i) {
    const auto v = static_cast<std::uint8_t>(std::clamp(std::lround(image[i]), 0L, 255L));
    cv.px[3 * i] = cv.px[3 * i + 1] = cv.px[3 * i + 2] = v;
  }
  for (int i = 0; i < psi.height(); i += spacing) {
    for (int j = 0; j + 1 < psi.width(); ++j) cv.line(psi(i, j), psi(i, j + 1), 0, 200, 0);
  }
  for (int j = 0; j < psi.width(); j += spacing) {
    for (int i = 0; i + 1 < psi.height(); ++i) cv.line(psi(i, j), psi(i + 1, j), 0, 200, 0);
  }
  for (int r = 0; r < mask.height(); ++r) {
    for (int c = 0; c < mask.width(); ++c) {
      if (!mask(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r + 1 == mask.height() || c + 1 == mask.width() || !mask(r - 1, c) ||
                        !mask(r + 1, c) || !mask(r, c - 1) || !mask(r, c + 1);
      if (edge) cv.put(c, r, 230, 30, 30);
    }
  }
  return encode_rgb_png(cv.height, cv.width, cv.px);
}

}  // namespace qis

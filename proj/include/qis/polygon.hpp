#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qis/error.hpp"
#include "qis/grid.hpp"

namespace qis {

using Polygon = std::vector<Vec2>;

// Even-odd fill sampled at pixel centers. The polygon is closed implicitly.
inline BinaryMask rasterize_polygon(const Polygon& poly, int height, int width) {
  if (poly.size() < 3) throw Error(ErrorCode::invalid_argument, "polygon needs at least 3 vertices");
  require_image_shape(height, width);
  BinaryMask out(height, width, 0);
  std::vector<double> xs;
  for (int r = 0; r < height; ++r) {
    const double y = r + 0.5;
    xs.clear();
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const Vec2& a = poly[i];
      const Vec2& b = poly[(i + 1) % poly.size()];
      if ((a.y <= y) != (b.y <= y)) xs.push_back(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // Pixel c is inside when xs[k] <= c + 0.5 < xs[k + 1].
      const int c0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
      const int c1 = std::min(width, static_cast<int>(std::ceil(xs[k + 1] - 0.5)));
      for (int c = c0; c < c1; ++c) out(r, c) = 1;
    }
  }
  return out;
}

// Accepts [[x, y], ...], [{"x":..,"y":..}, ...], or either wrapped as
// {"polygon": ...} / {"points": ...}.
inline Polygon parse_polygon(const nlohmann::json& j) {
  const nlohmann::json* arr = &j;
  if (j.is_object()) {
    if (j.contains("polygon")) {
      arr = &j.at("polygon");
    } else if (j.contains("points")) {
      arr = &j.at("points");
    } else {
      throw Error(ErrorCode::parse_error, "polygon object needs a \"polygon\" or \"points\" array");
    }
  }
  if (!arr->is_array()) throw Error(ErrorCode::parse_error, "polygon must be an array of vertices");
  Polygon out;
  try {
    for (const auto& v : *arr) {
      if (v.is_array()) {
        out.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
      } else {
        out.push_back({v.at("x").get<double>(), v.at("y").get<double>()});
      }
      if (!std::isfinite(out.back().x) || !std::isfinite(out.back().y)) {
        throw Error(ErrorCode::parse_error, "polygon vertex is not finite");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("malformed polygon: ") + e.what());
  }
  if (out.size() < 3) throw Error(ErrorCode::invalid_argument, "polygon needs at least 3 vertices");
  return out;
}

}  // namespace qis

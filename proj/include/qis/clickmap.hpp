#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qis/error.hpp"
#include "qis/grid.hpp"

namespace qis {

enum class Polarity { positive, negative };

inline const char* to_string(Polarity p) { return p == Polarity::positive ? "pos" : "neg"; }

struct Click {
  int x = 0;  // column
  int y = 0;  // row
  Polarity polarity = Polarity::positive;
  int step = 0;

  friend bool operator==(const Click&, const Click&) = default;
};

struct ClickMap {
  BinaryMask mask;
  std::vector<Click> source_clicks;
  Polarity polarity = Polarity::positive;
};

inline void require_in_bounds(int x, int y, int height, int width) {
  if (x < 0 || y < 0 || x >= width || y >= height) {
    throw Error(ErrorCode::out_of_bounds, "click (" + std::to_string(x) + ", " + std::to_string(y) +
                                              ") outside the " + std::to_string(width) + "x" +
                                              std::to_string(height) + " image");
  }
}

struct KMeans1D {
  std::vector<double> centers;  // ascending
  std::vector<int> assignment;
  int iterations = 0;
};

// Deterministic 1-D Lloyd iteration. Centers start at the (i + 0.5)/K
// quantiles; an emptied cluster is reseeded at the value farthest from its
// assigned center. Ties go to the lower-index center.
inline KMeans1D kmeans_1d(const std::vector<double>& values, int k) {
  if (values.empty()) throw Error(ErrorCode::empty_image, "k-means on an empty image");
  if (k < 1) throw Error(ErrorCode::invalid_argument, "k-means needs K >= 1");

  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  std::size_t distinct = 1;
  for (std::size_t i = 1; i < sorted.size(); ++i) distinct += sorted[i] != sorted[i - 1];
  k = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(k), distinct));

  KMeans1D out;
  out.centers.resize(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const double q = (i + 0.5) / k;
    auto idx = static_cast<std::size_t>(q * static_cast<double>(sorted.size()));
    out.centers[static_cast<std::size_t>(i)] = sorted[std::min(idx, sorted.size() - 1)];
  }
  out.assignment.assign(values.size(), 0);

  auto assign = [&] {
    for (std::size_t p = 0; p < values.size(); ++p) {
      int best = 0;
      double best_d = std::abs(values[p] - out.centers[0]);
      for (int i = 1; i < k; ++i) {
        const double d = std::abs(values[p] - out.centers[static_cast<std::size_t>(i)]);
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
      out.assignment[p] = best;
    }
  };

  for (out.iterations = 1; out.iterations <= 100; ++out.iterations) {
    assign();
    std::vector<double> sum(static_cast<std::size_t>(k), 0.0);
    std::vector<std::size_t> count(static_cast<std::size_t>(k), 0);
    for (std::size_t p = 0; p < values.size(); ++p) {
      sum[static_cast<std::size_t>(out.assignment[p])] += values[p];
      ++count[static_cast<std::size_t>(out.assignment[p])];
    }
    std::vector<double> next = out.centers;
    for (int i = 0; i < k; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      if (count[ui] > 0) {
        next[ui] = sum[ui] / static_cast<double>(count[ui]);
        continue;
      }
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t p = 0; p < values.size(); ++p) {
        const double d = std::abs(values[p] - out.centers[static_cast<std::size_t>(out.assignment[p])]);
        if (d > far_d) {
          far_d = d;
          far = p;
        }
      }
      next[ui] = values[far];
    }
    std::sort(next.begin(), next.end());
    double moved = 0.0;
    for (int i = 0; i < k; ++i) {
      moved = std::max(moved, std::abs(next[static_cast<std::size_t>(i)] - out.centers[static_cast<std::size_t>(i)]));
    }
    out.centers = std::move(next);
    if (moved < 1e-6) break;
  }
  out.iterations = std::min(out.iterations, 100);
  assign();
  return out;
}

// Per-pixel cluster index map; labels are cluster indices ordered by
// ascending center, count is the effective K.
inline RegionLabeling kmeans_labels(const ScalarField& img, int k) {
  if (img.empty()) throw Error(ErrorCode::empty_image, "k-means on an empty image");
  if (k < 2) throw Error(ErrorCode::invalid_argument, "k-means clustering needs K >= 2");
  const KMeans1D km = kmeans_1d(img.values(), k);
  RegionLabeling out;
  out.labels = Grid<int>(img.height(), img.width());
  for (std::size_t i = 0; i < img.size(); ++i) out.labels[i] = km.assignment[i];
  out.count = static_cast<int>(km.centers.size());
  out.cluster_of_label.resize(static_cast<std::size_t>(out.count));
  for (int i = 0; i < out.count; ++i) out.cluster_of_label[static_cast<std::size_t>(i)] = i;
  return out;
}

// Splits each cluster into its 4-connected pieces D^i_j.
inline RegionLabeling component_decomposition(const RegionLabeling& clusters) {
  return connected_components(clusters.labels);
}

inline ClickMap build_click_map(const std::vector<Click>& clicks, const RegionLabeling& components) {
  if (clicks.empty()) throw Error(ErrorCode::invalid_argument, "click map needs at least one click");
  const int h = components.labels.height();
  const int w = components.labels.width();
  const Polarity polarity = clicks.front().polarity;
  std::vector<char> chosen(static_cast<std::size_t>(components.count), 0);
  for (const Click& c : clicks) {
    if (c.polarity != polarity) throw Error(ErrorCode::mixed_polarity, "clicks of one step must share a polarity");
    require_in_bounds(c.x, c.y, h, w);
    chosen[static_cast<std::size_t>(components.labels(c.y, c.x))] = 1;
  }
  ClickMap out;
  out.polarity = polarity;
  out.source_clicks = clicks;
  out.mask = BinaryMask(h, w, 0);
  for (std::size_t i = 0; i < out.mask.size(); ++i) {
    out.mask[i] = chosen[static_cast<std::size_t>(components.labels[i])] ? 1 : 0;
  }
  return out;
}

// Every pixel visited by Bresenham traversal of each segment, first
// occurrence order kept.
inline std::vector<Click> stroke_to_clicks(const std::vector<std::pair<int, int>>& polyline, Polarity polarity,
                                           int step, int height, int width) {
  if (polyline.empty()) throw Error(ErrorCode::invalid_argument, "stroke needs at least one vertex");
  for (auto [x, y] : polyline) require_in_bounds(x, y, height, width);
  std::vector<Click> out;
  std::set<std::pair<int, int>> seen;
  auto emit = [&](int x, int y) {
    if (seen.emplace(x, y).second) out.push_back({x, y, polarity, step});
  };
  emit(polyline.front().first, polyline.front().second);
  for (std::size_t s = 1; s < polyline.size(); ++s) {
    int x0 = polyline[s - 1].first;
    int y0 = polyline[s - 1].second;
    const int x1 = polyline[s].first;
    const int y1 = polyline[s].second;
    const int dx = std::abs(x1 - x0);
    const int dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1;
    const int sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      emit(x0, y0);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
  return out;
}

// One interaction step as exchanged with clients:
//   {"step": n, "polarity": "pos"|"neg", "points": [{"x":..,"y":..}, ...]}
// or the same object carrying "stroke": [[x, y], ...] instead of points.
struct ClickStep {
  int step = 0;
  Polarity polarity = Polarity::positive;
  std::vector<Click> clicks;
};

inline Polarity parse_polarity(const std::string& s) {
  if (s == "pos") return Polarity::positive;
  if (s == "neg") return Polarity::negative;
  throw Error(ErrorCode::parse_error, "polarity must be \"pos\" or \"neg\", got \"" + s + "\"");
}

inline ClickStep parse_click_step(const nlohmann::json& j, int height, int width) {
  if (!j.is_object()) throw Error(ErrorCode::parse_error, "click step must be a JSON object");
  ClickStep out;
  try {
    out.step = j.value("step", 0);
    if (!j.contains("polarity")) throw Error(ErrorCode::parse_error, "click step lacks \"polarity\"");
    out.polarity = parse_polarity(j.at("polarity").get<std::string>());
    if (j.contains("points")) {
      for (const auto& p : j.at("points")) {
        const int x = p.at("x").get<int>();
        const int y = p.at("y").get<int>();
        require_in_bounds(x, y, height, width);
        Click c{x, y, out.polarity, out.step};
        if (std::find(out.clicks.begin(), out.clicks.end(), c) == out.clicks.end()) out.clicks.push_back(c);
      }
    }
    if (j.contains("stroke")) {
      std::vector<std::pair<int, int>> poly;
      for (const auto& v : j.at("stroke")) poly.emplace_back(v.at(0).get<int>(), v.at(1).get<int>());
      for (const Click& c : stroke_to_clicks(poly, out.polarity, out.step, height, width)) {
        if (std::find(out.clicks.begin(), out.clicks.end(), c) == out.clicks.end()) out.clicks.push_back(c);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("malformed click step: ") + e.what());
  }
  if (out.clicks.empty()) throw Error(ErrorCode::parse_error, "click step has no points");
  return out;
}

inline nlohmann::json to_json(const ClickStep& s) {
  nlohmann::json points = nlohmann::json::array();
  for (const Click& c : s.clicks) points.push_back({{"x", c.x}, {"y", c.y}});
  return {{"step", s.step}, {"polarity", to_string(s.polarity)}, {"points", points}};
}

inline std::vector<ClickStep> parse_click_script(const nlohmann::json& j, int height, int width) {
  if (!j.is_array()) throw Error(ErrorCode::parse_error, "click script must be a JSON array");
  std::vector<ClickStep> out;
  for (const auto& s : j) out.push_back(parse_click_step(s, height, width));
  return out;
}

}  // namespace qis

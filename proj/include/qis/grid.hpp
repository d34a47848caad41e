#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "qis/error.hpp"

namespace qis {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) { return a.x == b.x && a.y == b.y; }
};

// Row-major 2-D container. x is the column index, y the row index, origin at
// the top-left corner.
template <class T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(int height, int width, T fill = T{})
      : height_(height), width_(width) {
    if (height < 0 || width < 0) {
      throw Error(ErrorCode::invalid_argument, "grid dimensions must be nonnegative");
    }
    data_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int row, int col) { return data_[index(row, col)]; }
  const T& operator()(int row, int col) const { return data_[index(row, col)]; }

  // Replicated-edge access.
  const T& clamped(int row, int col) const {
    row = std::clamp(row, 0, height_ - 1);
    col = std::clamp(col, 0, width_ - 1);
    return data_[index(row, col)];
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  std::size_t index(int row, int col) const noexcept {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(col);
  }

  template <class U>
  bool same_shape(const Grid<U>& other) const noexcept {
    return height_ == other.height() && width_ == other.width();
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

using ScalarField = Grid<double>;
using BinaryMask = Grid<std::uint8_t>;

// Nodal grid: (pixel rows + 1) x (pixel cols + 1) node positions in the image
// plane, in pixel units. Node (i, j) of the identity sits at (x = j, y = i),
// so pixel (r, c) has its center at (c + 0.5, r + 0.5).
using DeformationField = Grid<Vec2>;

struct RegionLabeling {
  Grid<int> labels;
  std::vector<int> cluster_of_label;
  int count = 0;

  std::vector<std::size_t> label_sizes() const {
    std::vector<std::size_t> sizes(static_cast<std::size_t>(count), 0);
    for (int l : labels) ++sizes[static_cast<std::size_t>(l)];
    return sizes;
  }
};

template <class T, class U>
void require_same_shape(const Grid<T>& a, const Grid<U>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::dimension_mismatch, std::string(what) + ": dimension mismatch");
  }
}

inline void require_image_shape(int height, int width) {
  if (height < 2 || width < 2) {
    throw Error(ErrorCode::invalid_argument, "image must be at least 2x2 pixels");
  }
}

inline void require_finite(const ScalarField& field) {
  for (double v : field) {
    if (!std::isfinite(v)) throw Error(ErrorCode::invalid_argument, "field contains non-finite values");
  }
}

inline std::size_t count_ones(const BinaryMask& mask) {
  std::size_t n = 0;
  for (auto v : mask) n += v != 0;
  return n;
}

// Affine map onto [0, 255]; a constant field maps to all zeros.
inline ScalarField rescale_intensity(const ScalarField& img) {
  require_finite(img);
  ScalarField out(img.height(), img.width(), 0.0);
  if (img.empty()) return out;
  auto [lo_it, hi_it] = std::minmax_element(img.begin(), img.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo)) return out;
  if (lo == 0.0 && hi == 255.0) return img;
  // Dividing first sends hi to exactly 255.
  for (std::size_t i = 0; i < img.size(); ++i) {
    out[i] = std::clamp((img[i] - lo) / (hi - lo) * 255.0, 0.0, 255.0);
  }
  return out;
}

inline DeformationField identity_field(int pixel_rows, int pixel_cols) {
  DeformationField psi(pixel_rows + 1, pixel_cols + 1);
  for (int i = 0; i <= pixel_rows; ++i) {
    for (int j = 0; j <= pixel_cols; ++j) psi(i, j) = {double(j), double(i)};
  }
  return psi;
}

inline DeformationField translation_field(int pixel_rows, int pixel_cols, Vec2 shift) {
  DeformationField psi = identity_field(pixel_rows, pixel_cols);
  for (auto& p : psi) p = p + shift;
  return psi;
}

inline int pixel_rows_of(const DeformationField& psi) { return psi.height() - 1; }
inline int pixel_cols_of(const DeformationField& psi) { return psi.width() - 1; }

// Image of pixel (r, c)'s center under the bilinear nodal map.
inline Vec2 mapped_pixel_center(const DeformationField& psi, int r, int c) {
  const Vec2& p00 = psi(r, c);
  const Vec2& p01 = psi(r, c + 1);
  const Vec2& p10 = psi(r + 1, c);
  const Vec2& p11 = psi(r + 1, c + 1);
  return {0.25 * (p00.x + p01.x + p10.x + p11.x), 0.25 * (p00.y + p01.y + p10.y + p11.y)};
}

struct SampleWithGradient {
  double value = 0.0;
  double dx = 0.0;
  double dy = 0.0;
};

// Bilinear interpolation of a pixel-valued field at image-plane point
// (x, y). Samples live at pixel centers; points outside are clamped to the
// edge (replicated border), where the derivative across the border is zero.
inline SampleWithGradient sample_bilinear_with_gradient(const ScalarField& f, double x, double y) {
  const int w = f.width();
  const int h = f.height();
  double u = x - 0.5;
  double v = y - 0.5;
  bool u_clamped = false;
  bool v_clamped = false;
  if (u <= 0.0) { u = 0.0; u_clamped = true; }
  if (u >= w - 1) { u = w - 1; u_clamped = true; }
  if (v <= 0.0) { v = 0.0; v_clamped = true; }
  if (v >= h - 1) { v = h - 1; v_clamped = true; }
  int c0 = std::min(static_cast<int>(u), w - 2);
  int r0 = std::min(static_cast<int>(v), h - 2);
  const double fu = u - c0;
  const double fv = v - r0;
  const double f00 = f(r0, c0);
  const double f01 = f(r0, c0 + 1);
  const double f10 = f(r0 + 1, c0);
  const double f11 = f(r0 + 1, c0 + 1);
  SampleWithGradient s;
  s.value = (1 - fv) * ((1 - fu) * f00 + fu * f01) + fv * ((1 - fu) * f10 + fu * f11);
  s.dx = u_clamped ? 0.0 : (1 - fv) * (f01 - f00) + fv * (f11 - f10);
  s.dy = v_clamped ? 0.0 : (1 - fu) * (f10 - f00) + fu * (f11 - f01);
  return s;
}

inline double sample_bilinear(const ScalarField& f, double x, double y) {
  return sample_bilinear_with_gradient(f, x, y).value;
}

inline void require_compatible(const DeformationField& psi, int rows, int cols) {
  if (psi.height() != rows + 1 || psi.width() != cols + 1) {
    throw Error(ErrorCode::dimension_mismatch, "deformation field does not match image dimensions");
  }
}

// (field o psi) sampled at every pixel center.
inline ScalarField warp_field(const ScalarField& field, const DeformationField& psi) {
  require_compatible(psi, field.height(), field.width());
  ScalarField out(field.height(), field.width());
  for (int r = 0; r < field.height(); ++r) {
    for (int c = 0; c < field.width(); ++c) {
      const Vec2 p = mapped_pixel_center(psi, r, c);
      out(r, c) = sample_bilinear(field, p.x, p.y);
    }
  }
  return out;
}

inline ScalarField to_scalar(const BinaryMask& mask) {
  ScalarField out(mask.height(), mask.width());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] ? 1.0 : 0.0;
  return out;
}

// X_D o psi by bilinear interpolation of the raw 0/1 mask.
inline ScalarField warp_indicator(const BinaryMask& mask, const DeformationField& psi) {
  return warp_field(to_scalar(mask), psi);
}

inline BinaryMask threshold_mask(const ScalarField& field, double tau = 0.5) {
  BinaryMask out(field.height(), field.width(), 0);
  for (std::size_t i = 0; i < field.size(); ++i) out[i] = field[i] >= tau ? 1 : 0;
  return out;
}

// 4-connected labeling of equal-valued pixels, labels in raster first-seen
// order. cluster_of_label records the class value each label came from.
template <class T>
RegionLabeling connected_components(const Grid<T>& classes) {
  RegionLabeling out;
  out.labels = Grid<int>(classes.height(), classes.width(), -1);
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < classes.height(); ++r) {
    for (int c = 0; c < classes.width(); ++c) {
      if (out.labels(r, c) >= 0) continue;
      const int label = out.count++;
      const T value = classes(r, c);
      out.cluster_of_label.push_back(static_cast<int>(value));
      out.labels(r, c) = label;
      stack.emplace_back(r, c);
      while (!stack.empty()) {
        auto [pr, pc] = stack.back();
        stack.pop_back();
        constexpr int dr[4] = {-1, 1, 0, 0};
        constexpr int dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int nr = pr + dr[k];
          const int nc = pc + dc[k];
          if (nr < 0 || nc < 0 || nr >= classes.height() || nc >= classes.width()) continue;
          if (out.labels(nr, nc) >= 0 || !(classes(nr, nc) == value)) continue;
          out.labels(nr, nc) = label;
          stack.emplace_back(nr, nc);
        }
      }
    }
  }
  return out;
}

struct Topology {
  int components = 0;
  int holes = 0;

  int euler_characteristic() const noexcept { return components - holes; }
  friend bool operator==(const Topology&, const Topology&) = default;
};

// Foreground components under 4-connectivity; holes are 8-connected
// background components that do not touch the image border (the dual
// connectivity pair, so a diagonal gap never counts as both).
inline Topology topology_of(const BinaryMask& mask) {
  Topology t;
  const int h = mask.height();
  const int w = mask.width();
  Grid<int> seen(h, w, 0);
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (seen(r, c)) continue;
      const bool fg = mask(r, c) != 0;
      const int reach = fg ? 4 : 8;
      bool touches_border = false;
      seen(r, c) = 1;
      stack.emplace_back(r, c);
      while (!stack.empty()) {
        auto [pr, pc] = stack.back();
        stack.pop_back();
        if (pr == 0 || pc == 0 || pr == h - 1 || pc == w - 1) touches_border = true;
        constexpr int dr[8] = {-1, 1, 0, 0, -1, -1, 1, 1};
        constexpr int dc[8] = {0, 0, -1, 1, -1, 1, -1, 1};
        for (int k = 0; k < reach; ++k) {
          const int nr = pr + dr[k];
          const int nc = pc + dc[k];
          if (nr < 0 || nc < 0 || nr >= h || nc >= w) continue;
          if (seen(nr, nc) || ((mask(nr, nc) != 0) != fg)) continue;
          seen(nr, nc) = 1;
          stack.emplace_back(nr, nc);
        }
      }
      if (fg) {
        ++t.components;
      } else if (!touches_border) {
        ++t.holes;
      }
    }
  }
  return t;
}

// Separable Gaussian blur with replicated-edge boundary, radius ceil(3 sigma).
inline ScalarField gaussian_smooth(const ScalarField& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    sum += kernel[k + radius];
  }
  for (double& k : kernel) k /= sum;
  ScalarField tmp(img.height(), img.width());
  ScalarField out(img.height(), img.width());
  for (int r = 0; r < img.height(); ++r) {
    for (int c = 0; c < img.width(); ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * img.clamped(r, c + k);
      tmp(r, c) = acc;
    }
  }
  for (int r = 0; r < img.height(); ++r) {
    for (int c = 0; c < img.width(); ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp.clamped(r + k, c);
      out(r, c) = acc;
    }
  }
  return out;
}

// 2x2 block averaging; odd trailing rows/cols are averaged with their
// replicated edge.
inline ScalarField downsample2(const ScalarField& img) {
  const int h = (img.height() + 1) / 2;
  const int w = (img.width() + 1) / 2;
  ScalarField out(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      out(r, c) = 0.25 * (img.clamped(2 * r, 2 * c) + img.clamped(2 * r, 2 * c + 1) +
                          img.clamped(2 * r + 1, 2 * c) + img.clamped(2 * r + 1, 2 * c + 1));
    }
  }
  return out;
}

inline BinaryMask downsample2(const BinaryMask& mask) {
  return threshold_mask(downsample2(to_scalar(mask)), 0.5);
}

inline double dice(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b, "dice");
  std::size_t inter = 0;
  std::size_t na = 0;
  std::size_t nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]);
    na += a[i] != 0;
    nb += b[i] != 0;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

}  // namespace qis

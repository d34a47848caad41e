#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qis/clickmap.hpp"
#include "qis/grid.hpp"

namespace qis::synthetic {

// Image, template and click script with known ground truth.
struct Scenario {
  std::string name;
  ScalarField image;
  BinaryMask templ;
  BinaryMask truth;                        // after the last step
  std::vector<ClickStep> script;
  std::vector<BinaryMask> truth_per_step;  // step 0 .. script.size()
};

inline BinaryMask disk(int h, int w, double cx, double cy, double radius) {
  BinaryMask m(h, w, 0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const double dx = c + 0.5 - cx;
      const double dy = r + 0.5 - cy;
      m(r, c) = dx * dx + dy * dy <= radius * radius ? 1 : 0;
    }
  }
  return m;
}

inline BinaryMask ellipse(int h, int w, double cx, double cy, double rx, double ry) {
  BinaryMask m(h, w, 0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const double dx = (c + 0.5 - cx) / rx;
      const double dy = (r + 0.5 - cy) / ry;
      m(r, c) = dx * dx + dy * dy <= 1.0 ? 1 : 0;
    }
  }
  return m;
}

inline BinaryMask rectangle(int h, int w, int x0, int y0, int x1, int y1) {
  BinaryMask m(h, w, 0);
  for (int r = std::max(0, y0); r < std::min(h, y1); ++r) {
    for (int c = std::max(0, x0); c < std::min(w, x1); ++c) m(r, c) = 1;
  }
  return m;
}

inline BinaryMask mask_or(const BinaryMask& a, const BinaryMask& b) {
  BinaryMask out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (a[i] || b[i]) ? 1 : 0;
  return out;
}

inline BinaryMask mask_minus(const BinaryMask& a, const BinaryMask& b) {
  BinaryMask out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (a[i] && !b[i]) ? 1 : 0;
  return out;
}

// Piecewise-constant image painted layer by layer.
inline ScalarField paint(int h, int w, double background, const std::vector<std::pair<BinaryMask, double>>& layers) {
  ScalarField img(h, w, background);
  for (const auto& [m, v] : layers) {
    for (std::size_t i = 0; i < img.size(); ++i) {
      if (m[i]) img[i] = v;
    }
  }
  return img;
}

inline void add_gaussian_noise(ScalarField& img, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  for (double& v : img) v += n(rng);
}

inline ClickStep click_step(int step, Polarity p, std::vector<std::pair<int, int>> xy) {
  ClickStep s{step, p, {}};
  for (auto [x, y] : xy) s.clicks.push_back({x, y, p, step});
  return s;
}

// Bright disk on a dark background; the template is a smaller, offset disk.
inline Scenario circle(int size = 128, double noise_sigma = 0.0, std::uint64_t seed = 1) {
  Scenario s;
  s.name = noise_sigma > 0.0 ? "noisy_circle" : "circle";
  const double c = size / 2.0;
  s.truth = disk(size, size, c, c, 0.25 * size);
  s.templ = disk(size, size, c - 0.05 * size, c + 0.04 * size, 0.19 * size);
  s.image = paint(size, size, 50.0, {{s.truth, 200.0}});
  if (noise_sigma > 0.0) add_gaussian_noise(s.image, noise_sigma, seed);
  s.truth_per_step = {s.truth};
  return s;
}

// A mid-gray taco resting on a bright plate. Step 0 grabs taco and plate
// together; one negative click on the plate leaves the taco.
inline Scenario taco_plate(int size = 256) {
  Scenario s;
  s.name = "taco_plate";
  const double k = size / 256.0;
  const double c = size / 2.0;
  const BinaryMask plate = disk(size, size, c, c, 96 * k);
  const BinaryMask taco = ellipse(size, size, c, c + 6 * k, 62 * k, 44 * k);
  s.image = paint(size, size, 25.0, {{plate, 215.0}, {taco, 120.0}});
  s.templ = disk(size, size, c, c, 70 * k);
  s.truth = taco;
  s.truth_per_step = {mask_or(plate, taco), taco};
  s.script = {click_step(1, Polarity::negative, {{static_cast<int>(c - 82 * k), static_cast<int>(c)}})};
  return s;
}

// A vertical knife laid across a plate cuts the plate into two pieces; each
// piece needs its own negative click.
inline Scenario knife_plate(int size = 256) {
  Scenario s;
  s.name = "knife_plate";
  const double k = size / 256.0;
  const double c = size / 2.0;
  const BinaryMask plate = disk(size, size, c, c, 90 * k);
  const BinaryMask band = rectangle(size, size, static_cast<int>(c - 26 * k), 0, static_cast<int>(c + 26 * k), size);
  const BinaryMask knife = mask_minus(plate, mask_minus(plate, band));
  s.image = paint(size, size, 25.0, {{plate, 215.0}, {knife, 120.0}});
  s.templ = ellipse(size, size, c, c, 50 * k, 75 * k);
  s.truth = knife;
  const BinaryMask left = rectangle(size, size, 0, 0, static_cast<int>(c - 26 * k), size);
  s.truth_per_step = {plate, mask_minus(plate, left), knife};
  s.script = {click_step(1, Polarity::negative, {{static_cast<int>(c - 60 * k), static_cast<int>(c)}}),
              click_step(2, Polarity::negative, {{static_cast<int>(c + 60 * k), static_cast<int>(c)}})};
  return s;
}

// A bright disk with a dim lobe attached on its right. Step 0 finds the
// disk; one positive click on the lobe pulls it in.
inline Scenario disk_lobe(int size = 128) {
  Scenario s;
  s.name = "disk_lobe";
  const double k = size / 128.0;
  const double c = size / 2.0;
  const BinaryMask body = disk(size, size, c - 12 * k, c, 30 * k);
  const BinaryMask lobe = ellipse(size, size, c + 22 * k, c, 24 * k, 16.8 * k);
  s.image = paint(size, size, 20.0, {{lobe, 70.0}, {body, 220.0}});
  s.templ = disk(size, size, c - 14 * k, c + 3 * k, 24 * k);
  s.truth = mask_or(body, lobe);
  s.truth_per_step = {body, s.truth};
  s.script = {click_step(1, Polarity::positive, {{static_cast<int>(c + 36 * k), static_cast<int>(c)}})};
  return s;
}

}  // namespace qis::synthetic

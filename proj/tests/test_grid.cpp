#include <gtest/gtest.h>

#include "qis/grid.hpp"
#include "support.hpp"

using namespace qis;
using qis::gen::Rng;

TEST(RescaleIntensity, ByteRangeIsUnchanged) {
  ScalarField f(16, 16);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = double(i % 256);
  EXPECT_EQ(rescale_intensity(f), f);
}

TEST(RescaleIntensity, ConstantMapsToZero) {
  const ScalarField out = rescale_intensity(ScalarField(4, 5, 7.0));
  for (double v : out) EXPECT_EQ(v, 0.0);
}

TEST(RescaleIntensity, AffineMap) {
  ScalarField f(1, 3);
  f[0] = 10;
  f[1] = 20;
  f[2] = 30;
  const ScalarField out = rescale_intensity(f);
  EXPECT_DOUBLE_EQ(out[0], 0.0);
  EXPECT_DOUBLE_EQ(out[1], 127.5);
  EXPECT_DOUBLE_EQ(out[2], 255.0);
}

TEST(RescaleIntensity, IdempotentAndBoundedOnRandomFields) {
  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    const ScalarField f = gen::random_field(rng, 2 + t % 7, 3 + t % 5, -1e3, 1e3);
    const ScalarField once = rescale_intensity(f);
    EXPECT_EQ(*std::min_element(once.begin(), once.end()), 0.0);
    EXPECT_EQ(*std::max_element(once.begin(), once.end()), 255.0);
    const ScalarField twice = rescale_intensity(once);
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(twice[i], once[i], 1e-12);
  }
}

TEST(RescaleIntensity, RejectsNonFinite) {
  ScalarField f(2, 2, 1.0);
  f[3] = std::nan("");
  EXPECT_THROW(rescale_intensity(f), Error);
}

TEST(WarpIndicator, IdentityReproducesMaskExactly) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const BinaryMask m = gen::random_mask(rng, 9 + t, 13, 0.4);
    const ScalarField w = warp_indicator(m, identity_field(m.height(), m.width()));
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(w[i], double(m[i]));
    EXPECT_EQ(threshold_mask(w), m);
  }
}

TEST(WarpIndicator, IntegerTranslationShiftsMask) {
  BinaryMask m(20, 20, 0);
  for (int r = 6; r < 12; ++r) {
    for (int c = 8; c < 14; ++c) m(r, c) = 1;
  }
  // psi(x) = x + (3, 0) samples the mask three columns to the right.
  const BinaryMask out = threshold_mask(warp_indicator(m, translation_field(20, 20, {3.0, 0.0})));
  for (int r = 0; r < 20; ++r) {
    for (int c = 0; c < 20; ++c) EXPECT_EQ(out(r, c), m.clamped(r, c + 3)) << r << "," << c;
  }
}

TEST(WarpIndicator, TranslationCommutesOnRandomInteriorMasks) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    BinaryMask m(24, 24, 0);
    for (int r = 6; r < 18; ++r) {
      for (int c = 6; c < 18; ++c) m(r, c) = rng() % 2;
    }
    const int dx = gen::uniform_int(rng, -5, 5);
    const int dy = gen::uniform_int(rng, -5, 5);
    const ScalarField w = warp_indicator(m, translation_field(24, 24, {double(dx), double(dy)}));
    for (int r = 0; r < 24; ++r) {
      for (int c = 0; c < 24; ++c) EXPECT_EQ(w(r, c), double(m.clamped(r + dy, c + dx)));
    }
  }
}

TEST(WarpIndicator, HalfPixelShiftAveragesAcrossStepEdge) {
  BinaryMask m(6, 8, 0);
  for (int r = 0; r < 6; ++r) {
    for (int c = 4; c < 8; ++c) m(r, c) = 1;
  }
  const ScalarField w = warp_indicator(m, translation_field(6, 8, {0.5, 0.0}));
  for (int r = 0; r < 6; ++r) {
    EXPECT_DOUBLE_EQ(w(r, 2), 0.0);
    EXPECT_DOUBLE_EQ(w(r, 3), 0.5);
    EXPECT_DOUBLE_EQ(w(r, 4), 1.0);
  }
}

TEST(WarpIndicator, RejectsMismatchedField) {
  EXPECT_THROW(warp_indicator(BinaryMask(4, 4), identity_field(4, 5)), Error);
}

TEST(ThresholdMask, TieRuleIsInclusive) {
  for (double v : threshold_mask(ScalarField(3, 3, 0.5))) EXPECT_EQ(v, 1);
  for (double v : threshold_mask(ScalarField(3, 3, 0.49))) EXPECT_EQ(v, 0);
}

TEST(ConnectedComponents, TwoSquaresAndBackground) {
  BinaryMask m(10, 10, 0);
  for (int r = 1; r < 4; ++r) {
    for (int c = 1; c < 4; ++c) m(r, c) = 1;
  }
  for (int r = 6; r < 9; ++r) {
    for (int c = 6; c < 9; ++c) m(r, c) = 1;
  }
  const RegionLabeling l = connected_components(m);
  EXPECT_EQ(l.count, 3);
  EXPECT_EQ(l.labels(0, 0), 0);  // background seen first
  EXPECT_EQ(l.labels(1, 1), 1);
  EXPECT_EQ(l.labels(7, 7), 2);
  EXPECT_EQ(l.cluster_of_label[1], 1);
}

TEST(ConnectedComponents, AllOnes) { EXPECT_EQ(connected_components(BinaryMask(5, 7, 1)).count, 1); }

TEST(ConnectedComponents, CheckerboardIsolatesEveryPixel) {
  BinaryMask m(6, 6);
  for (int r = 0; r < 6; ++r) {
    for (int c = 0; c < 6; ++c) m(r, c) = (r + c) % 2;
  }
  EXPECT_EQ(connected_components(m).count, 36);
}

namespace {

bool four_connected(const Grid<int>& labels, int label) {
  int sr = -1, sc = -1;
  std::size_t total = 0;
  for (int r = 0; r < labels.height(); ++r) {
    for (int c = 0; c < labels.width(); ++c) {
      if (labels(r, c) == label) {
        ++total;
        if (sr < 0) {
          sr = r;
          sc = c;
        }
      }
    }
  }
  Grid<int> seen(labels.height(), labels.width(), 0);
  std::vector<std::pair<int, int>> st{{sr, sc}};
  seen(sr, sc) = 1;
  std::size_t reached = 0;
  while (!st.empty()) {
    auto [r, c] = st.back();
    st.pop_back();
    ++reached;
    const int nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
    for (auto& n : nb) {
      if (n[0] < 0 || n[1] < 0 || n[0] >= labels.height() || n[1] >= labels.width()) continue;
      if (seen(n[0], n[1]) || labels(n[0], n[1]) != label) continue;
      seen(n[0], n[1]) = 1;
      st.emplace_back(n[0], n[1]);
    }
  }
  return reached == total;
}

}  // namespace

TEST(ConnectedComponents, RandomLabelingsArePartitionsOfConnectedSets) {
  Rng rng(17);
  for (int t = 0; t < 30; ++t) {
    Grid<int> classes(12, 15);
    for (int& v : classes) v = gen::uniform_int(rng, 0, 2);
    const RegionLabeling l = connected_components(classes);
    for (std::size_t i = 0; i < classes.size(); ++i) {
      ASSERT_GE(l.labels[i], 0);
      ASSERT_LT(l.labels[i], l.count);
      EXPECT_EQ(l.cluster_of_label[static_cast<std::size_t>(l.labels[i])], classes[i]);
    }
    for (int k = 0; k < l.count; ++k) EXPECT_TRUE(four_connected(l.labels, k));
    // Relabeling is a bijection: the same partition comes back.
    const RegionLabeling again = connected_components(l.labels);
    EXPECT_EQ(again.count, l.count);
    EXPECT_EQ(again.labels, l.labels);
  }
}

TEST(Topology, CountsComponentsAndHoles) {
  BinaryMask disk(20, 20, 0);
  BinaryMask ring(20, 20, 0);
  for (int r = 0; r < 20; ++r) {
    for (int c = 0; c < 20; ++c) {
      const double d = std::hypot(r - 9.5, c - 9.5);
      disk(r, c) = d < 6;
      ring(r, c) = d < 8 && d > 3;
    }
  }
  EXPECT_EQ(topology_of(disk), (Topology{1, 0}));
  EXPECT_EQ(topology_of(ring), (Topology{1, 1}));
  EXPECT_EQ(topology_of(ring).euler_characteristic(), 0);
  BinaryMask two = disk;
  two(0, 0) = 1;
  EXPECT_EQ(topology_of(two).components, 2);
}

TEST(Topology, DiagonalGapIsNotAHole) {
  // A diagonal chain of pixels separates nothing under the dual pair.
  BinaryMask m(5, 5, 0);
  for (int k = 0; k < 5; ++k) m(k, k) = 1;
  const Topology t = topology_of(m);
  EXPECT_EQ(t.components, 5);
  EXPECT_EQ(t.holes, 0);
}

TEST(Sampling, GradientMatchesFiniteDifferences) {
  Rng rng(23);
  const ScalarField f = gen::random_field(rng, 9, 11, 0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    const double x = gen::uniform(rng, 0.7, 10.3);
    const double y = gen::uniform(rng, 0.7, 8.3);
    const SampleWithGradient s = sample_bilinear_with_gradient(f, x, y);
    const double h = 1e-6;
    // Stay inside one bilinear patch for the difference quotient.
    if (std::abs(x - 0.5 - std::round(x - 0.5)) < 1e-4 || std::abs(y - 0.5 - std::round(y - 0.5)) < 1e-4) continue;
    EXPECT_NEAR(s.dx, (sample_bilinear(f, x + h, y) - sample_bilinear(f, x - h, y)) / (2 * h), 1e-7);
    EXPECT_NEAR(s.dy, (sample_bilinear(f, x, y + h) - sample_bilinear(f, x, y - h)) / (2 * h), 1e-7);
  }
}

TEST(Sampling, ClampsOutsideTheDomain) {
  ScalarField f(2, 2);
  f(0, 0) = 1;
  f(0, 1) = 2;
  f(1, 0) = 3;
  f(1, 1) = 4;
  EXPECT_DOUBLE_EQ(sample_bilinear(f, -5.0, -5.0), 1.0);
  EXPECT_DOUBLE_EQ(sample_bilinear(f, 50.0, 50.0), 4.0);
  EXPECT_DOUBLE_EQ(sample_bilinear_with_gradient(f, -5.0, 1.0).dx, 0.0);
}

TEST(GaussianSmooth, PreservesConstantsAndMeanOfInteriorImpulse) {
  const ScalarField c = gaussian_smooth(ScalarField(8, 8, 3.0), 1.0);
  for (double v : c) EXPECT_NEAR(v, 3.0, 1e-12);
  ScalarField imp(15, 15, 0.0);
  imp(7, 7) = 1.0;
  const ScalarField s = gaussian_smooth(imp, 1.0);
  double sum = 0;
  for (double v : s) sum += v;
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_NEAR(s(7, 6), s(6, 7), 1e-15);
}

TEST(Downsample, HalvesDimensionsAndRebinarizes) {
  BinaryMask m(7, 6, 0);
  m(0, 0) = m(0, 1) = m(1, 0) = 1;
  const BinaryMask d = downsample2(m);
  EXPECT_EQ(d.height(), 4);
  EXPECT_EQ(d.width(), 3);
  EXPECT_EQ(d(0, 0), 1);
  EXPECT_EQ(d(0, 1), 0);
}

TEST(Dice, Examples) {
  Rng rng(1);
  const BinaryMask a = gen::random_mask(rng, 10, 10, 0.5);
  EXPECT_DOUBLE_EQ(dice(a, a), 1.0);
  BinaryMask left(4, 4, 0), right(4, 4, 0);
  for (int r = 0; r < 4; ++r) {
    left(r, 0) = 1;
    right(r, 3) = 1;
  }
  EXPECT_DOUBLE_EQ(dice(left, right), 0.0);
  EXPECT_THROW(dice(left, BinaryMask(4, 5)), Error);
}

#include <gtest/gtest.h>

#include <cmath>

#include "cmri/ingest.hpp"
#include "cmri/metrics.hpp"
#include "cmri/phantom.hpp"

using namespace cmri;

namespace {

PhantomSpec small_spec() {
  PhantomSpec spec;
  spec.slices = 4;
  return spec;
}

double mean_in_box(const RealImage& img, int r0, int c0, int r1, int c1) {
  double s = 0.0;
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c) s += img(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  return s / ((r1 - r0) * (c1 - c0));
}

}  // namespace

TEST(Phantom, Groups) {
  const auto groups = dataset_groups();
  EXPECT_EQ(groups.size(), 9u);
  int unlabeled = 0;
  for (const auto& g : groups) unlabeled += g.volume_class == VolumeClass::Unlabeled;
  EXPECT_EQ(unlabeled, 3);
}

TEST(Phantom, Deterministic) {
  const PhantomSpec spec = small_spec();
  const auto a = generate_volume(spec, Sequence::AXT1, VolumeClass::Abnormal, 3);
  const auto b = generate_volume(spec, Sequence::AXT1, VolumeClass::Abnormal, 3);
  EXPECT_EQ(a.kspace.data, b.kspace.data);
  EXPECT_EQ(a.boxes, b.boxes);
  const auto c = generate_volume(spec, Sequence::AXT1, VolumeClass::Abnormal, 4);
  EXPECT_NE(a.kspace.data, c.kspace.data);
}

TEST(Phantom, BoxesByClass) {
  const PhantomSpec spec = small_spec();
  for (int i = 0; i < 6; ++i) {
    const auto normal = generate_volume(spec, Sequence::AXFLAIR, VolumeClass::Normal, i);
    EXPECT_TRUE(normal.boxes.empty());
    const auto abnormal = generate_volume(spec, Sequence::AXFLAIR, VolumeClass::Abnormal, i);
    ASSERT_GE(abnormal.boxes.size(), 1u);
    ASSERT_LE(abnormal.boxes.size(), 3u);
    for (const auto& b : abnormal.boxes) {
      const Mask& brain = abnormal.brain_regions[static_cast<std::size_t>(b.slice)];
      for (int r = b.row0; r < b.row1; ++r)
        for (int c = b.col0; c < b.col1; ++c)
          ASSERT_TRUE(brain(static_cast<std::size_t>(r), static_cast<std::size_t>(c)));
    }
  }
}

TEST(Phantom, ReconstructionMatchesGroundTruth) {
  const PhantomSpec spec = small_spec();
  for (Sequence s : {Sequence::AXT2, Sequence::AXT1PRE}) {
    const auto v = generate_volume(spec, s, VolumeClass::Unlabeled, 1);
    const auto slices = reconstruct_volume(v.kspace);
    for (std::size_t i = 0; i < slices.size(); ++i) {
      EXPECT_GE(phase_coherence(slices[i], v.ground_truth[i]), 0.99);
    }
  }
}

// The anatomy is mirror-symmetric and lesions stay clear of the midline, so the
// mirrored box is a matched lesion-free region.
TEST(Phantom, LesionVisibility) {
  const PhantomSpec spec = small_spec();
  int checked = 0;
  for (int i = 0; i < 5; ++i) {
    const auto v = generate_volume(spec, Sequence::AXFLAIR, VolumeClass::Abnormal, i);
    const auto slices = reconstruct_volume(v.kspace);
    for (const auto& b : v.boxes) {
      const RealImage mag = magnitude(slices[static_cast<std::size_t>(b.slice)]);
      const RealImage truth = magnitude(v.ground_truth[static_cast<std::size_t>(b.slice)]);
      // Rescale to the ground-truth units, in which the contrast delta is defined.
      double scale = 0.0;
      for (double x : truth) scale = std::max(scale, x);
      const int cols = static_cast<int>(spec.cols);
      const int m0 = cols - b.col1, m1 = cols - b.col0;
      const double inside = mean_in_box(mag, b.row0, b.col0, b.row1, b.col1) * scale;
      const double mirror = mean_in_box(mag, b.row0, m0, b.row1, m1) * scale;
      EXPECT_GT(std::abs(inside - mirror), 0.5 * spec.lesion.contrast) << "volume " << i;
      ++checked;
    }
  }
  EXPECT_GT(checked, 0);
}

TEST(Phantom, SmoothPhaseAwayFromLesions) {
  const PhantomSpec spec = small_spec();
  const auto v = generate_volume(spec, Sequence::AXT1POST, VolumeClass::Unlabeled, 0);
  for (std::size_t s = 0; s < v.ground_truth.size(); ++s) {
    const ComplexField& f = v.ground_truth[s];
    const Mask& brain = v.brain_regions[s];
    double worst = 0.0;
    for (std::size_t r = 0; r + 1 < f.rows(); ++r) {
      for (std::size_t c = 0; c + 1 < f.cols(); ++c) {
        if (!brain(r, c) || !brain(r + 1, c) || !brain(r, c + 1)) continue;
        worst = std::max(worst, std::abs(std::arg(f(r + 1, c) * std::conj(f(r, c)))));
        worst = std::max(worst, std::abs(std::arg(f(r, c + 1) * std::conj(f(r, c)))));
      }
    }
    EXPECT_LT(worst, 0.2) << "slice " << s;
  }
}

TEST(Phantom, SpecValidation) {
  PhantomSpec spec;
  spec.lesion.radius_max = 50;
  EXPECT_ANY_THROW(spec.validate());
  spec = PhantomSpec{};
  spec.coils = 0;
  EXPECT_ANY_THROW(spec.validate());
  EXPECT_NO_THROW(PhantomSpec{}.validate());
}

TEST(Phantom, VolumeIds) {
  PhantomSpec spec;
  EXPECT_EQ(make_volume_id(spec, Sequence::AXFLAIR, VolumeClass::Abnormal, 7), "AXFLAIR_abnormal_007");
  spec.id_prefix = "ext_";
  EXPECT_EQ(make_volume_id(spec, Sequence::AXT1, VolumeClass::Normal, 12), "ext_AXT1_normal_012");
}

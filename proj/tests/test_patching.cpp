#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cmri/error.hpp"
#include "cmri/patching.hpp"

using namespace cmri;

namespace {

RealImage disk_image(std::size_t n, double cr, double cc, double radius, double value) {
  RealImage img(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c)
      if (std::hypot(r - cr, c - cc) <= radius) img(r, c) = value;
  return img;
}

// A synthetic prepared volume: one slice whose brain is a large disk.
PreparedVolume disk_volume(VolumeClass cls, std::vector<BoundingBox> boxes, double radius = 140) {
  PreparedVolume v;
  v.volume_id = "disk";
  v.sequence = Sequence::AXFLAIR;
  v.volume_class = cls;
  const RealImage img = disk_image(320, 160, 160, radius, 0.8);
  ComplexField slice(320, 320);
  for (std::size_t i = 0; i < img.size(); ++i) slice[i] = Complex(img[i], 0.1 * img[i]);
  v.slices.push_back(slice);
  v.masks.push_back(brain_mask(img));
  v.boxes = std::move(boxes);
  return v;
}

void expect_rules(const PreparedVolume& v, const std::vector<PatchRecord>& patches,
                  const PatchingOptions& opt = {}) {
  for (const auto& p : patches) {
    ASSERT_EQ(p.data.size(), kPatchValues);
    const Mask& m = v.masks[static_cast<std::size_t>(p.slice_index)];
    EXPECT_GE(mask_coverage(m, p.row, p.col), opt.min_mask_coverage);
    if (p.condition.abnormality == Abnormality::Abnormal) {
      double best = 0.0;
      for (const auto& b : v.boxes) {
        if (b.slice != p.slice_index) continue;
        best = std::max(best, static_cast<double>(intersection_area(b, p.row, p.col, kPatchSize)) / b.area());
      }
      EXPECT_GE(best, opt.min_box_overlap);
      EXPECT_GE(p.overlap_fraction, opt.min_box_overlap);
    }
  }
}

}  // namespace

TEST(BrainMask, EmptyForZeroSlice) {
  const Mask m = brain_mask(RealImage(64, 64));
  for (auto v : m) EXPECT_EQ(v, 0);
}

TEST(BrainMask, DiskGeometry) {
  const RealImage img = disk_image(128, 64, 60, 30, 0.8);
  const Mask m = brain_mask(img);
  int disk = 0, hit = 0;
  for (std::size_t r = 0; r < 128; ++r) {
    for (std::size_t c = 0; c < 128; ++c) {
      const double d = std::hypot(r - 64.0, c - 60.0);
      if (d <= 30) {
        ++disk;
        hit += m(r, c);
      }
      if (m(r, c)) EXPECT_LE(d, 32.0);
    }
  }
  EXPECT_GE(hit, 0.99 * disk);
}

TEST(BrainMask, LargestComponentAndHoles) {
  RealImage img = disk_image(128, 40, 40, 30, 0.8);
  const RealImage small = disk_image(128, 100, 100, 9.5, 0.8);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] += small[i];
  // A dark hole inside the large disk is filled.
  for (std::size_t r = 35; r < 45; ++r)
    for (std::size_t c = 35; c < 45; ++c) img(r, c) = 0.0;
  const Mask m = brain_mask(img);
  EXPECT_EQ(m(100, 100), 0);
  EXPECT_EQ(m(40, 40), 1);
  EXPECT_EQ(m(20, 40), 1);
}

TEST(Patching, PatchesPerBox) {
  const PatchingOptions opt;
  EXPECT_EQ(patches_for_box(96 * 96, opt), 10);
  EXPECT_EQ(patches_for_box(24 * 24, opt), 4);
  EXPECT_EQ(patches_for_box(200 * 200, opt), 20);
  EXPECT_GT(patches_for_box(96 * 96, opt), patches_for_box(96 * 96 / 4, opt));
}

TEST(Patching, LabeledRulesOnCenteredBox) {
  const PreparedVolume v = disk_volume(VolumeClass::Abnormal, {{0, 148, 148, 172, 172}});
  Rng rng(5);
  const auto res = extract_labeled_patches(v, rng);
  int abnormal = 0, normal = 0;
  for (const auto& p : res.patches) {
    if (p.condition.abnormality == Abnormality::Abnormal) ++abnormal;
    else {
      ++normal;
      EXPECT_EQ(intersection_area(v.boxes[0], p.row, p.col, kPatchSize), 0);
    }
  }
  EXPECT_EQ(abnormal, 4);
  EXPECT_EQ(normal, 6);
  expect_rules(v, res.patches);
  EXPECT_TRUE(res.warnings.empty());
}

TEST(Patching, LargerBoxMorePatches) {
  Rng rng(1);
  const auto big = extract_labeled_patches(disk_volume(VolumeClass::Abnormal, {{0, 112, 112, 208, 208}}), rng);
  const auto small = extract_labeled_patches(disk_volume(VolumeClass::Abnormal, {{0, 136, 136, 184, 184}}), rng);
  auto count = [](const ExtractionResult& r) {
    return std::count_if(r.patches.begin(), r.patches.end(),
                         [](const auto& p) { return p.condition.abnormality == Abnormality::Abnormal; });
  };
  EXPECT_GT(count(big), count(small));
}

TEST(Patching, VolumeCountsClipped) {
  std::vector<BoundingBox> boxes;
  for (int i = 0; i < 3; ++i) boxes.push_back({0, 100 + 20 * i, 100, 200 + 20 * i, 200});
  const PreparedVolume v = disk_volume(VolumeClass::Abnormal, boxes);
  Rng rng(9);
  const auto res = extract_labeled_patches(v, rng);
  EXPECT_GE(res.patches.size(), 10u);
  EXPECT_LE(res.patches.size(), 40u);
  expect_rules(v, res.patches);
}

TEST(Patching, BoxLargerThanSlice) {
  const PreparedVolume v = disk_volume(VolumeClass::Abnormal, {{0, 0, 0, 400, 10}});
  Rng rng(1);
  EXPECT_THROW(extract_labeled_patches(v, rng), std::invalid_argument);
}

TEST(Patching, RandomPatches) {
  const PreparedVolume v = disk_volume(VolumeClass::Unlabeled, {});
  Rng a(1), b(2);
  const auto ra = extract_random_patches(v, a, 10);
  const auto rb = extract_random_patches(v, b, 10);
  ASSERT_EQ(ra.patches.size(), 10u);
  expect_rules(v, ra.patches);
  for (const auto& p : ra.patches) EXPECT_EQ(p.condition.abnormality, Abnormality::Unknown);
  std::set<std::pair<int, int>> origins_a, origins_b;
  for (const auto& p : ra.patches) origins_a.insert({p.row, p.col});
  for (const auto& p : rb.patches) origins_b.insert({p.row, p.col});
  EXPECT_NE(origins_a, origins_b);

  const PreparedVolume tiny = disk_volume(VolumeClass::Normal, {}, 40);
  Rng c(3);
  const auto none = extract_random_patches(tiny, c, 10);
  EXPECT_TRUE(none.patches.empty());
  EXPECT_FALSE(none.warnings.empty());
  EXPECT_THROW(extract_random_patches(v, c, 9), std::invalid_argument);
}

TEST(Patching, GridOrigins) {
  ComplexField slice(320, 320);
  for (std::size_t i = 0; i < slice.size(); ++i) slice[i] = Complex(static_cast<double>(i % 977), 0.0);
  const auto patches = extract_grid_patches(slice, {Sequence::AXT1, Abnormality::Normal}, "v", 2,
                                            VolumeClass::Normal);
  ASSERT_EQ(patches.size(), 4u);
  std::set<std::pair<int, int>> origins;
  for (const auto& p : patches) {
    origins.insert({p.row, p.col});
    EXPECT_TRUE(p.row <= 160 && 160 < p.row + kPatchSize);
    EXPECT_TRUE(p.col <= 160 && 160 < p.col + kPatchSize);
    EXPECT_GE(p.row, 75);
    EXPECT_LE(p.row + kPatchSize, 246);
    EXPECT_EQ(p.data[0], static_cast<float>(slice(static_cast<std::size_t>(p.row), static_cast<std::size_t>(p.col)).real()));
  }
  EXPECT_EQ(origins, (std::set<std::pair<int, int>>{{75, 75}, {75, 150}, {150, 75}, {150, 150}}));
  EXPECT_EQ(kGridAxisOrigins.back() + kPatchSize, 320);
  EXPECT_THROW(extract_grid_patches(ComplexField(256, 256), {}, "v", 0, VolumeClass::Normal),
               std::invalid_argument);
}

TEST(Patching, PatchFieldRoundTrip) {
  ComplexField slice(100, 100);
  for (std::size_t i = 0; i < slice.size(); ++i) slice[i] = Complex(0.25 * (i % 7), -0.5 * (i % 3));
  PatchRecord p;
  p.data = cut_patch(slice, 2, 3);
  const ComplexField f = p.field();
  EXPECT_EQ(f(0, 0), slice(2, 3));
  EXPECT_EQ(f(95, 95), slice(97, 98));
  EXPECT_THROW(cut_patch(slice, 5, 0), std::invalid_argument);
}

namespace {

std::vector<VolumeLabel> labels(int n, VolumeClass cls, Sequence seq) {
  std::vector<VolumeLabel> out;
  for (int i = 0; i < n; ++i) out.push_back({std::string(to_string(seq)) + "_" + std::string(to_string(cls)) + std::to_string(i), seq, cls});
  return out;
}

std::array<int, 3> counts(const SplitManifest& m) {
  std::array<int, 3> c{};
  for (const auto& [id, s] : m.assignment) ++c[static_cast<std::size_t>(s)];
  return c;
}

}  // namespace

TEST(Split, Ratios) {
  const auto labeled = labels(20, VolumeClass::Normal, Sequence::AXT1);
  EXPECT_EQ(counts(split_volumes(labeled, 1)), (std::array<int, 3>{14, 3, 3}));
  const auto unlabeled = labels(40, VolumeClass::Unlabeled, Sequence::AXT2);
  EXPECT_EQ(counts(split_volumes(unlabeled, 1)), (std::array<int, 3>{38, 1, 1}));
}

TEST(Split, DeterministicAndSeedDependent) {
  const auto v = labels(30, VolumeClass::Abnormal, Sequence::AXFLAIR);
  EXPECT_EQ(split_volumes(v, 4).assignment, split_volumes(v, 4).assignment);
  EXPECT_NE(split_volumes(v, 4).assignment, split_volumes(v, 5).assignment);
}

TEST(Split, StratifiedAndTooFew) {
  auto v = labels(10, VolumeClass::Normal, Sequence::AXT1);
  const auto w = labels(10, VolumeClass::Abnormal, Sequence::AXT1);
  v.insert(v.end(), w.begin(), w.end());
  const auto m = split_volumes(v, 2);
  // Each class is split on its own: 10 volumes give 6/2/2.
  EXPECT_EQ(counts(m), (std::array<int, 3>{12, 4, 4}));
  EXPECT_THROW(split_volumes(labels(2, VolumeClass::Normal, Sequence::AXT1), 1), ValidationError);
  EXPECT_EQ(counts(split_volumes(labels(2, VolumeClass::Unlabeled, Sequence::AXT2), 1)),
            (std::array<int, 3>{2, 0, 0}));
}

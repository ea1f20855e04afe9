#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmri/grid.hpp"
#include "cmri/labels.hpp"
#include "cmri/phantom.hpp"
#include "cmri/rng.hpp"

namespace cmri {

inline constexpr int kPatchSize = 96;
inline constexpr std::size_t kPatchValues = 2 * kPatchSize * kPatchSize;

// One 2x96x96 patch: channel 0 holds the real part, channel 1 the imaginary part.
struct PatchRecord {
  std::vector<float> data;
  ConditionLabel condition;
  std::string volume_id;
  VolumeClass volume_class = VolumeClass::Normal;
  int slice_index = 0;
  int row = 0;
  int col = 0;
  double overlap_fraction = 0.0;

  ComplexField field() const;
};

// Copy the 96x96 window at (row, col) of a slice into a patch.
std::vector<float> cut_patch(const ComplexField& slice, int row, int col);

// Normalized complex slices of one volume plus their brain masks and annotations.
struct PreparedVolume {
  std::string volume_id;
  Sequence sequence = Sequence::Null;
  VolumeClass volume_class = VolumeClass::Normal;
  std::vector<ComplexField> slices;
  std::vector<Mask> masks;
  std::vector<BoundingBox> boxes;
};

PreparedVolume prepare_volume(const KSpaceStack& kspace, VolumeClass cls,
                              std::vector<BoundingBox> boxes, std::size_t resize_to = 0);

/// Otsu threshold on the magnitude, largest 4-connected component, holes filled.
/// An all-zero slice gives an empty mask.
Mask brain_mask(const RealImage& magnitude);

struct PatchingOptions {
  double min_mask_coverage = 0.80;
  double min_box_overlap = 0.25;
  int min_per_volume = 10;
  int max_per_volume = 40;
  int min_per_box = 4;
  int max_per_box = 20;
  double patches_per_patch_area = 10.0;  // patches for a box covering 96x96 pixels
  int max_attempts = 200;
  int random_patches_per_volume = 12;
};

// Patches to cut around a box of the given area.
int patches_for_box(int box_area, const PatchingOptions& opt);

struct ExtractionResult {
  std::vector<PatchRecord> patches;
  std::vector<std::string> warnings;
};

/// Abnormal patches around every box (overlap and mask rules enforced) plus
/// at least as many normal patches from unannotated regions of the same
/// volume; the volume total is kept inside [min_per_volume, max_per_volume].
/// Throws std::invalid_argument for a box larger than its slice.
ExtractionResult extract_labeled_patches(const PreparedVolume& volume, Rng& rng,
                                         const PatchingOptions& opt = {});

// n patches uniformly over all placements that satisfy the mask rule.
ExtractionResult extract_random_patches(const PreparedVolume& volume, Rng& rng, int n,
                                        const PatchingOptions& opt = {});

inline constexpr std::array<int, 4> kGridAxisOrigins = {0, 75, 150, 224};
inline constexpr std::array<std::pair<int, int>, 4> kGridRetained = {
    {{75, 75}, {75, 150}, {150, 75}, {150, 150}}};

// The four centre cells of the 4x4 stride-75 grid of a 320x320 slice.
std::vector<PatchRecord> extract_grid_patches(const ComplexField& slice, ConditionLabel condition,
                                              const std::string& volume_id, int slice_index,
                                              VolumeClass volume_class);

// Fraction of a 96x96 window inside the mask.
double mask_coverage(const Mask& mask, int row, int col);

enum class Split { Train = 0, Validation, Test };
std::string_view to_string(Split s);

struct VolumeLabel {
  std::string volume_id;
  Sequence sequence = Sequence::Null;
  VolumeClass volume_class = VolumeClass::Normal;
};

struct SplitRatios {
  double train, validation, test;
};
inline constexpr SplitRatios kLabeledRatios{0.70, 0.15, 0.15};
inline constexpr SplitRatios kUnlabeledRatios{0.95, 0.025, 0.025};

struct SplitManifest {
  std::map<std::string, Split> assignment;
  SplitRatios labeled_ratios = kLabeledRatios;
  SplitRatios unlabeled_ratios = kUnlabeledRatios;
  std::uint64_t seed = 0;

  Split of(const std::string& volume_id) const;
};

/// Volume-level split stratified by (class, sequence), deterministic in seed.
/// Throws ValidationError when a labeled group has fewer than 3 volumes.
SplitManifest split_volumes(std::span<const VolumeLabel> volumes, std::uint64_t seed);

}  // namespace cmri

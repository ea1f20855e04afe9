#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cmri/grid.hpp"
#include "cmri/ingest.hpp"
#include "cmri/labels.hpp"

namespace cmri {

// Tissue magnitudes in [0, 1] and a global phase offset for one sequence.
struct SequenceProfile {
  double skull = 0.7;
  double csf = 0.1;
  double gray = 0.5;
  double white = 0.6;
  double deep = 0.5;
  double phase_offset = 0.0;
};

struct LesionParams {
  double radius_min = 8.0;  // pixels
  double radius_max = 18.0;
  double contrast = 0.35;        // magnitude added at the lesion core
  double phase_amplitude = 1.0;  // depth of the phase dip, radians
  int max_lesions = 3;
};

struct PhantomSpec {
  std::uint64_t seed = 7;
  int volumes_per_group = 22;
  std::size_t rows = 320;
  std::size_t cols = 320;
  std::size_t slices = 8;
  std::size_t coils = 4;
  double snr_db = 30.0;
  std::array<SequenceProfile, kSequenceCount> profiles = default_profiles();
  LesionParams lesion;
  std::string id_prefix;

  static std::array<SequenceProfile, kSequenceCount> default_profiles();
  // Throws ValidationError when a field is out of range.
  void validate() const;
};

// Half-open pixel box [row0, row1) x [col0, col1) on one slice.
struct BoundingBox {
  int slice = 0;
  int row0 = 0;
  int col0 = 0;
  int row1 = 0;
  int col1 = 0;

  int area() const { return (row1 - row0) * (col1 - col0); }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// Area of the intersection of a box with the square window at (row, col).
int intersection_area(const BoundingBox& box, int row, int col, int size);

struct PhantomVolume {
  KSpaceStack kspace;
  std::vector<BoundingBox> boxes;
  std::vector<ComplexField> ground_truth;  // noise-free object per slice
  std::vector<ComplexField> sensitivities;  // true coil maps (shared by all slices)
  std::vector<Mask> brain_regions;          // true brain support per slice
  VolumeClass volume_class = VolumeClass::Normal;
};

struct VolumeGroup {
  Sequence sequence;
  VolumeClass volume_class;
};

// The (sequence, class) groups of the dataset: three labeled sequences with
// normal and abnormal volumes, plus unlabeled AXT1POST, AXT1PRE and AXT2.
std::vector<VolumeGroup> dataset_groups();

std::string make_volume_id(const PhantomSpec& spec, Sequence s, VolumeClass c, int index);

/// Deterministic multi-coil phantom volume.
///
/// Anatomy is nested ellipses (skull, CSF gap, cortex, white matter, deep
/// nuclei, ventricles) with a smooth polynomial phase. Abnormal volumes get
/// 1..max_lesions single-slice lesions that raise the magnitude and dip the
/// phase; each gets a tight bounding box. The object is weighted by smooth
/// complex coil maps, transformed to k-space and corrupted with complex
/// Gaussian noise at spec.snr_db (total signal to total noise energy).
PhantomVolume generate_volume(const PhantomSpec& spec, Sequence sequence, VolumeClass cls,
                              int volume_index);

}  // namespace cmri

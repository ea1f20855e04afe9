#pragma once

#include <complex>
#include <span>
#include <string>
#include <vector>

#include "cmri/grid.hpp"
#include "cmri/labels.hpp"

namespace cmri {

// Multi-coil k-space volume, stored coil-major: (coil, slice, row, col).
struct KSpaceStack {
  std::size_t coils = 0;
  std::size_t slices = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::complex<float>> data;
  Sequence sequence = Sequence::Null;
  std::string volume_id;

  KSpaceStack() = default;
  KSpaceStack(std::size_t coils, std::size_t slices, std::size_t rows, std::size_t cols);

  std::complex<float>& at(std::size_t coil, std::size_t slice, std::size_t r, std::size_t c) {
    return data[((coil * slices + slice) * rows + r) * cols + c];
  }
  const std::complex<float>& at(std::size_t coil, std::size_t slice, std::size_t r,
                                std::size_t c) const {
    return data[((coil * slices + slice) * rows + r) * cols + c];
  }

  ComplexField slice_kspace(std::size_t coil, std::size_t slice) const;
  void set_slice_kspace(std::size_t coil, std::size_t slice, const ComplexField& k);

  // Throws std::invalid_argument unless coils >= 1, rows/cols >= 32 and all data finite.
  void validate() const;
};

struct SensitivityMaps {
  std::vector<ComplexField> maps;  // one per coil
  Mask support;                    // pixels where the maps are defined
};

struct SensitivityOptions {
  std::size_t calibration = 24;  // side of the central k-space calibration square
  double support_eps = 1e-8;
};

/// Resize k-space to target x target: zero-fill small axes, crop large ones,
/// always keeping the centre sample (index n/2) at the centre (index target/2).
ComplexField resize_kspace(const ComplexField& kspace, std::size_t target = 320);

/// Low-resolution matched-filter sensitivity estimate.
///
/// Each coil image is low-passed to the central calibration square of its
/// k-space, then divided by the root-sum-of-squares of all low-passed coils.
/// The shared phase of the coil sum is removed so that the coil sum of the
/// maps is real and non-negative; without that reference the combination
/// would strip the object's smooth phase. Pixels whose combined low-pass
/// magnitude is below support_eps get a zero map. Throws std::invalid_argument
/// ("no signal support") for all-zero input.
SensitivityMaps estimate_sensitivities(std::span<const ComplexField> coil_images,
                                       const SensitivityOptions& opt = {});

// out = sum_c conj(map_c) * coil_c.
ComplexField coil_combine(std::span<const ComplexField> coil_images, const SensitivityMaps& maps);

struct NormalizedSlice {
  ComplexField field;
  double scale = 0.0;  // the max magnitude the slice was divided by; 0 for an all-zero slice
};

// Divide both channels by the slice's max magnitude; phase is untouched.
NormalizedSlice normalize_slice(const ComplexField& slice);

// Per-slice reconstruction: inverse transform of every coil, sensitivity
// estimate, combination, normalization. Optionally resizes k-space first.
std::vector<ComplexField> reconstruct_volume(const KSpaceStack& kspace,
                                             std::size_t resize_to = 0,
                                             const SensitivityOptions& opt = {});

}  // namespace cmri

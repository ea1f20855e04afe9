#pragma once

#include <span>

#include "cmri/grid.hpp"

namespace cmri {

struct MagPhase {
  RealImage magnitude;
  RealImage phase;  // radians in [-pi, pi]; zero-magnitude pixels have phase 0
};

MagPhase to_mag_phase(const ComplexField& field);
ComplexField to_reim(const RealImage& magnitude, const RealImage& phase);
RealImage magnitude(const ComplexField& field);

/// Phase coherence |sum conj(pred) * target| / (||pred|| ||target||).
///
/// Invariant to a global phase factor on either argument and symmetric.
/// Returns 0 when exactly one argument is zero; throws std::domain_error
/// ("undefined coherence") when both are.
double phase_coherence(std::span<const Complex> pred, std::span<const Complex> target);
double phase_coherence(const ComplexField& pred, const ComplexField& target);

/// PSNR in dB with peak 1.0. Identical inputs give +infinity.
double psnr(std::span<const double> pred, std::span<const double> target);
double psnr(const RealImage& pred, const RealImage& target);

struct SsimOptions {
  int window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

// Mean SSIM over every fully contained window (uniform weights, sample
// covariance). Throws std::invalid_argument when the image is smaller than
// the window.
double ssim(const RealImage& pred, const RealImage& target, const SsimOptions& opt = {});

// Same, averaged only over windows whose centre pixel lies inside `mask`.
// Returns NaN when no window centre is inside the mask.
double ssim(const RealImage& pred, const RealImage& target, const Mask& mask,
            const SsimOptions& opt = {});

/// AUROC in Mann-Whitney form: P(score_pos > score_neg) + 0.5 P(tie).
/// Labels are 0/1 and must contain both classes (std::invalid_argument otherwise).
double auroc(std::span<const double> scores, std::span<const int> labels);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t count = 0;
};
MeanStd mean_std(std::span<const double> values);

}  // namespace cmri

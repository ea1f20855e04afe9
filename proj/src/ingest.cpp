#include "cmri/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cmri/fft.hpp"

namespace cmri {

KSpaceStack::KSpaceStack(std::size_t coils_, std::size_t slices_, std::size_t rows_,
                         std::size_t cols_)
    : coils(coils_), slices(slices_), rows(rows_), cols(cols_),
      data(coils_ * slices_ * rows_ * cols_) {}

ComplexField KSpaceStack::slice_kspace(std::size_t coil, std::size_t slice) const {
  ComplexField out(rows, cols);
  const auto* src = &data[(coil * slices + slice) * rows * cols];
  for (std::size_t i = 0; i < rows * cols; ++i) out[i] = Complex(src[i].real(), src[i].imag());
  return out;
}

void KSpaceStack::set_slice_kspace(std::size_t coil, std::size_t slice, const ComplexField& k) {
  if (k.rows() != rows || k.cols() != cols) throw std::invalid_argument("set_slice_kspace: shape");
  auto* dst = &data[(coil * slices + slice) * rows * cols];
  for (std::size_t i = 0; i < rows * cols; ++i) {
    dst[i] = std::complex<float>(static_cast<float>(k[i].real()), static_cast<float>(k[i].imag()));
  }
}

void KSpaceStack::validate() const {
  if (coils < 1) throw std::invalid_argument("KSpaceStack: needs at least one coil");
  if (rows < 32 || cols < 32) throw std::invalid_argument("KSpaceStack: slices must be >= 32x32");
  if (data.size() != coils * slices * rows * cols) {
    throw std::invalid_argument("KSpaceStack: data size does not match shape");
  }
  for (const auto& v : data) {
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) {
      throw std::invalid_argument("KSpaceStack: non-finite sample");
    }
  }
}

ComplexField resize_kspace(const ComplexField& kspace, std::size_t target) {
  if (kspace.rows() < 2 || kspace.cols() < 2) {
    throw std::invalid_argument("resize_kspace: axes must have at least 2 samples");
  }
  ComplexField out(target, target);
  // Destination index i reads source index i - target/2 + n/2 on each axis.
  const auto shift_r = static_cast<std::ptrdiff_t>(kspace.rows() / 2) -
                       static_cast<std::ptrdiff_t>(target / 2);
  const auto shift_c = static_cast<std::ptrdiff_t>(kspace.cols() / 2) -
                       static_cast<std::ptrdiff_t>(target / 2);
  for (std::size_t r = 0; r < target; ++r) {
    const std::ptrdiff_t sr = static_cast<std::ptrdiff_t>(r) + shift_r;
    if (sr < 0 || sr >= static_cast<std::ptrdiff_t>(kspace.rows())) continue;
    for (std::size_t c = 0; c < target; ++c) {
      const std::ptrdiff_t sc = static_cast<std::ptrdiff_t>(c) + shift_c;
      if (sc < 0 || sc >= static_cast<std::ptrdiff_t>(kspace.cols())) continue;
      out(r, c) = kspace(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc));
    }
  }
  return out;
}

namespace {

// Image of the central calibration square of k-space.
ComplexField lowpass_kspace(ComplexField k, std::size_t calibration) {
  const std::size_t cal_r = std::min(calibration, k.rows());
  const std::size_t cal_c = std::min(calibration, k.cols());
  const std::size_t r0 = k.rows() / 2 - cal_r / 2;
  const std::size_t c0 = k.cols() / 2 - cal_c / 2;
  for (std::size_t r = 0; r < k.rows(); ++r) {
    const bool keep_row = r >= r0 && r < r0 + cal_r;
    for (std::size_t c = 0; c < k.cols(); ++c) {
      if (!keep_row || c < c0 || c >= c0 + cal_c) k(r, c) = 0.0;
    }
  }
  return ift2c(k);
}

void require_signal(std::span<const ComplexField> coil_images) {
  if (coil_images.empty()) throw std::invalid_argument("estimate_sensitivities: no coils");
  const std::size_t rows = coil_images.front().rows();
  const std::size_t cols = coil_images.front().cols();
  bool any_signal = false;
  for (const auto& img : coil_images) {
    if (img.rows() != rows || img.cols() != cols) {
      throw std::invalid_argument("estimate_sensitivities: coil shape mismatch");
    }
    any_signal = any_signal || std::any_of(img.begin(), img.end(),
                                           [](const Complex& v) { return v != Complex{}; });
  }
  if (!any_signal) throw std::invalid_argument("no signal support");
}

SensitivityMaps maps_from_lowres(const std::vector<ComplexField>& low, const SensitivityOptions& opt) {
  const std::size_t rows = low.front().rows();
  const std::size_t cols = low.front().cols();
  SensitivityMaps out;
  out.support = Mask(rows, cols, 0);
  out.maps.assign(low.size(), ComplexField(rows, cols));
  for (std::size_t i = 0; i < rows * cols; ++i) {
    double sos = 0.0;
    Complex sum{};
    for (const auto& l : low) {
      sos += std::norm(l[i]);
      sum += l[i];
    }
    const double rss = std::sqrt(sos);
    if (rss < opt.support_eps) continue;
    out.support[i] = 1;
    const double sum_mag = std::abs(sum);
    const Complex unphase = sum_mag > 0.0 ? std::conj(sum) / sum_mag : Complex(1.0, 0.0);
    for (std::size_t c = 0; c < low.size(); ++c) out.maps[c][i] = low[c][i] * unphase / rss;
  }
  return out;
}

}  // namespace

SensitivityMaps estimate_sensitivities(std::span<const ComplexField> coil_images,
                                       const SensitivityOptions& opt) {
  require_signal(coil_images);
  std::vector<ComplexField> low;
  low.reserve(coil_images.size());
  for (const auto& img : coil_images) low.push_back(lowpass_kspace(fft2c(img), opt.calibration));
  return maps_from_lowres(low, opt);
}

ComplexField coil_combine(std::span<const ComplexField> coil_images, const SensitivityMaps& maps) {
  if (coil_images.size() != maps.maps.size() || coil_images.empty()) {
    throw std::invalid_argument("coil_combine: coil count mismatch");
  }
  ComplexField out(coil_images.front().rows(), coil_images.front().cols());
  for (std::size_t c = 0; c < coil_images.size(); ++c) {
    require_same_shape(coil_images[c], maps.maps[c], "coil_combine");
    require_same_shape(coil_images[c], out, "coil_combine");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += std::conj(maps.maps[c][i]) * coil_images[c][i];
  }
  return out;
}

NormalizedSlice normalize_slice(const ComplexField& slice) {
  double peak = 0.0;
  for (const auto& v : slice) peak = std::max(peak, std::abs(v));
  if (peak == 0.0) return {slice, 0.0};
  NormalizedSlice out{ComplexField(slice.rows(), slice.cols()), peak};
  for (std::size_t i = 0; i < slice.size(); ++i) out.field[i] = slice[i] / peak;
  return out;
}

std::vector<ComplexField> reconstruct_volume(const KSpaceStack& kspace, std::size_t resize_to,
                                             const SensitivityOptions& opt) {
  std::vector<ComplexField> slices;
  slices.reserve(kspace.slices);
  std::vector<ComplexField> coils(kspace.coils), low(kspace.coils);
  for (std::size_t s = 0; s < kspace.slices; ++s) {
    for (std::size_t c = 0; c < kspace.coils; ++c) {
      ComplexField k = kspace.slice_kspace(c, s);
      if (resize_to != 0) k = resize_kspace(k, resize_to);
      coils[c] = ift2c(k);
      low[c] = lowpass_kspace(std::move(k), opt.calibration);
    }
    require_signal(coils);
    const SensitivityMaps maps = maps_from_lowres(low, opt);
    slices.push_back(normalize_slice(coil_combine(coils, maps)).field);
  }
  return slices;
}

}  // namespace cmri

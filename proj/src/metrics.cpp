#include "cmri/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace cmri {

MagPhase to_mag_phase(const ComplexField& field) {
  MagPhase out{RealImage(field.rows(), field.cols()), RealImage(field.rows(), field.cols())};
  for (std::size_t i = 0; i < field.size(); ++i) {
    out.magnitude[i] = std::abs(field[i]);
    // atan2(0, 0) == 0, and atan2 never leaves [-pi, pi].
    out.phase[i] = std::atan2(field[i].imag(), field[i].real());
  }
  return out;
}

ComplexField to_reim(const RealImage& magnitude, const RealImage& phase) {
  require_same_shape(magnitude, phase, "to_reim");
  ComplexField out(magnitude.rows(), magnitude.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::polar(magnitude[i], phase[i]);
  return out;
}

RealImage magnitude(const ComplexField& field) {
  RealImage out(field.rows(), field.cols());
  for (std::size_t i = 0; i < field.size(); ++i) out[i] = std::abs(field[i]);
  return out;
}

double phase_coherence(std::span<const Complex> pred, std::span<const Complex> target) {
  if (pred.size() != target.size()) throw std::invalid_argument("phase_coherence: shape mismatch");
  Complex inner{0.0, 0.0};
  double pred_sq = 0.0;
  double target_sq = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inner += std::conj(pred[i]) * target[i];
    pred_sq += std::norm(pred[i]);
    target_sq += std::norm(target[i]);
  }
  if (pred_sq == 0.0 && target_sq == 0.0) throw std::domain_error("undefined coherence");
  if (pred_sq == 0.0 || target_sq == 0.0) return 0.0;
  const double gamma = std::abs(inner) / (std::sqrt(pred_sq) * std::sqrt(target_sq));
  return std::min(gamma, 1.0);
}

double phase_coherence(const ComplexField& pred, const ComplexField& target) {
  require_same_shape(pred, target, "phase_coherence");
  return phase_coherence(pred.values(), target.values());
}

double psnr(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) {
    throw std::invalid_argument("psnr: shape mismatch");
  }
  double sse = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    sse += d * d;
  }
  if (sse == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = sse / static_cast<double>(pred.size());
  return 10.0 * std::log10(1.0 / mse);
}

double psnr(const RealImage& pred, const RealImage& target) {
  require_same_shape(pred, target, "psnr");
  return psnr(pred.values(), target.values());
}

namespace {

// Summed-area table with a zero guard row/column.
class Integral {
 public:
  template <typename F>
  Integral(std::size_t rows, std::size_t cols, F&& value)
      : cols_(cols + 1), sums_((rows + 1) * (cols + 1), 0.0) {
    for (std::size_t r = 0; r < rows; ++r) {
      double row_sum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        row_sum += value(r, c);
        sums_[(r + 1) * cols_ + c + 1] = sums_[r * cols_ + c + 1] + row_sum;
      }
    }
  }
  // Sum over rows [r0, r1) and cols [c0, c1).
  double box(std::size_t r0, std::size_t c0, std::size_t r1, std::size_t c1) const {
    return sums_[r1 * cols_ + c1] - sums_[r0 * cols_ + c1] - sums_[r1 * cols_ + c0] +
           sums_[r0 * cols_ + c0];
  }

 private:
  std::size_t cols_;
  std::vector<double> sums_;
};

template <typename Accept>
double ssim_impl(const RealImage& x, const RealImage& y, const SsimOptions& opt, Accept&& accept) {
  require_same_shape(x, y, "ssim");
  const auto win = static_cast<std::size_t>(opt.window);
  if (opt.window < 2 || x.rows() < win || x.cols() < win) {
    throw std::invalid_argument("ssim: image smaller than window");
  }
  const double c1 = std::pow(opt.k1 * opt.data_range, 2);
  const double c2 = std::pow(opt.k2 * opt.data_range, 2);
  const Integral sx(x.rows(), x.cols(), [&](auto r, auto c) { return x(r, c); });
  const Integral sy(x.rows(), x.cols(), [&](auto r, auto c) { return y(r, c); });
  const Integral sxx(x.rows(), x.cols(), [&](auto r, auto c) { return x(r, c) * x(r, c); });
  const Integral syy(x.rows(), x.cols(), [&](auto r, auto c) { return y(r, c) * y(r, c); });
  const Integral sxy(x.rows(), x.cols(), [&](auto r, auto c) { return x(r, c) * y(r, c); });

  const double n = static_cast<double>(win * win);
  const double cov_norm = n / (n - 1.0);
  const std::size_t half = win / 2;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + win <= x.rows(); ++r) {
    for (std::size_t c = 0; c + win <= x.cols(); ++c) {
      if (!accept(r + half, c + half)) continue;
      const double mx = sx.box(r, c, r + win, c + win) / n;
      const double my = sy.box(r, c, r + win, c + win) / n;
      const double vx = cov_norm * (sxx.box(r, c, r + win, c + win) / n - mx * mx);
      const double vy = cov_norm * (syy.box(r, c, r + win, c + win) / n - my * my);
      const double cxy = cov_norm * (sxy.box(r, c, r + win, c + win) / n - mx * my);
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  if (count == 0) return std::numeric_limits<double>::quiet_NaN();
  return total / static_cast<double>(count);
}

}  // namespace

double ssim(const RealImage& pred, const RealImage& target, const SsimOptions& opt) {
  return ssim_impl(pred, target, opt, [](std::size_t, std::size_t) { return true; });
}

double ssim(const RealImage& pred, const RealImage& target, const Mask& mask,
            const SsimOptions& opt) {
  require_same_shape(pred, mask, "ssim mask");
  return ssim_impl(pred, target, opt,
                   [&](std::size_t r, std::size_t c) { return mask(r, c) != 0; });
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: size mismatch");
  std::size_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("auroc: labels must be 0 or 1");
    n_pos += static_cast<std::size_t>(l);
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc: labels contain a single class");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Twice the Mann-Whitney U statistic, kept integral so the final division is exact.
  // Within a tie group every positive beats all lower negatives and ties with
  // the group's negatives (worth one half each).
  std::uint64_t twice_u = 0;
  std::size_t negatives_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos = 0;
    std::size_t neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? pos : neg) += 1;
      ++j;
    }
    twice_u += 2 * pos * negatives_below + pos * neg;
    negatives_below += neg;
    i = j;
  }
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos * n_neg));
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  out.count = values.size();
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(values.size()));
  return out;
}

}  // namespace cmri

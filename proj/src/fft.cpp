#include "cmri/fft.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>

namespace cmri {
namespace {

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};
using Buffer = std::unique_ptr<fftw_complex[], FftwFree>;

Buffer make_buffer(std::size_t n) {
  return Buffer(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n)));
}

// Plans are created once per (rows, cols, direction) for in-place transforms
// on fftw_malloc'd buffers; fftw_execute_dft is thread-safe, the planner is not.
class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(int rows, int cols, int sign) {
    std::lock_guard lock(mutex_);
    auto key = std::make_tuple(rows, cols, sign);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    Buffer scratch = make_buffer(static_cast<std::size_t>(rows) * cols);
    fftw_plan plan = fftw_plan_dft_2d(rows, cols, scratch.get(), scratch.get(), sign, FFTW_ESTIMATE);
    plans_.emplace(key, plan);
    return plan;
  }

  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<int, int, int>, fftw_plan> plans_;
};

// out = fftshift(F(ifftshift(in))) / sqrt(N), F the forward or inverse DFT.
ComplexField centered_transform(const ComplexField& in, int sign) {
  const std::size_t rows = in.rows();
  const std::size_t cols = in.cols();
  ComplexField out(rows, cols);
  if (in.empty()) return out;

  Buffer buf = make_buffer(rows * cols);
  // ifftshift moves index floor(n/2) to 0; fftshift moves it back.
  const std::size_t rs = rows / 2;
  const std::size_t cs = cols / 2;
  const std::size_t split = cols - cs;  // source columns [cs, cols) land at [0, split)
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t dr = r >= rs ? r - rs : r + rows - rs;
    const Complex* src = &in(r, 0);
    fftw_complex* dst = buf.get() + dr * cols;
    for (std::size_t c = cs; c < cols; ++c) {
      dst[c - cs][0] = src[c].real();
      dst[c - cs][1] = src[c].imag();
    }
    for (std::size_t c = 0; c < cs; ++c) {
      dst[split + c][0] = src[c].real();
      dst[split + c][1] = src[c].imag();
    }
  }
  fftw_plan plan = PlanCache::instance().get(static_cast<int>(rows), static_cast<int>(cols), sign);
  fftw_execute_dft(plan, buf.get(), buf.get());

  const double scale = 1.0 / std::sqrt(static_cast<double>(rows * cols));
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t sr = r >= rs ? r - rs : r + rows - rs;
    const fftw_complex* src = buf.get() + sr * cols;
    Complex* dst = &out(r, 0);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t sc = c >= cs ? c - cs : c + cols - cs;
      dst[c] = Complex(src[sc][0] * scale, src[sc][1] * scale);
    }
  }
  return out;
}

}  // namespace

ComplexField fft2c(const ComplexField& image) { return centered_transform(image, FFTW_FORWARD); }

ComplexField ift2c(const ComplexField& kspace) { return centered_transform(kspace, FFTW_BACKWARD); }

}  // namespace cmri

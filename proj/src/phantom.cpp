#include "cmri/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "cmri/error.hpp"
#include "cmri/fft.hpp"
#include "cmri/rng.hpp"

namespace cmri {

std::array<SequenceProfile, kSequenceCount> PhantomSpec::default_profiles() {
  return {{
      // skull, csf, gray, white, deep, phase offset
      {0.55, 0.08, 0.62, 0.48, 0.56, 0.3},   // AXFLAIR
      {0.75, 0.12, 0.45, 0.62, 0.50, -0.6},  // AXT1
      {0.80, 0.15, 0.48, 0.60, 0.55, 1.1},   // AXT1POST
      {0.72, 0.10, 0.42, 0.58, 0.47, -1.4},  // AXT1PRE
      {0.45, 0.85, 0.55, 0.40, 0.35, 2.0},   // AXT2
  }};
}

void PhantomSpec::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError("phantom: " + what); };
  if (volumes_per_group < 1) fail("volumes_per_group must be >= 1");
  if (rows < 96 || cols < 96) fail("slices must be at least 96x96");
  if (slices < 1) fail("slices must be >= 1");
  if (coils < 1) fail("coils must be >= 1");
  if (!std::isfinite(snr_db)) fail("snr_db must be finite");
  if (lesion.radius_min < 4.0 || lesion.radius_max > 40.0 || lesion.radius_min > lesion.radius_max) {
    fail("lesion radius range must lie within [4, 40] pixels");
  }
  if (lesion.max_lesions < 1 || lesion.max_lesions > 3) fail("max_lesions must be in [1, 3]");
  for (const auto& p : profiles) {
    for (double v : {p.skull, p.csf, p.gray, p.white, p.deep}) {
      if (v < 0.0 || v > 1.0) fail("tissue intensities must lie in [0, 1]");
    }
  }
}

int intersection_area(const BoundingBox& box, int row, int col, int size) {
  const int r0 = std::max(box.row0, row);
  const int r1 = std::min(box.row1, row + size);
  const int c0 = std::max(box.col0, col);
  const int c1 = std::min(box.col1, col + size);
  return (r1 > r0 && c1 > c0) ? (r1 - r0) * (c1 - c0) : 0;
}

std::vector<VolumeGroup> dataset_groups() {
  return {
      {Sequence::AXFLAIR, VolumeClass::Normal},     {Sequence::AXFLAIR, VolumeClass::Abnormal},
      {Sequence::AXT1, VolumeClass::Normal},        {Sequence::AXT1, VolumeClass::Abnormal},
      {Sequence::AXT1POST, VolumeClass::Normal},    {Sequence::AXT1POST, VolumeClass::Abnormal},
      {Sequence::AXT1POST, VolumeClass::Unlabeled}, {Sequence::AXT1PRE, VolumeClass::Unlabeled},
      {Sequence::AXT2, VolumeClass::Unlabeled},
  };
}

std::string make_volume_id(const PhantomSpec& spec, Sequence s, VolumeClass c, int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", index);
  return spec.id_prefix + std::string(to_string(s)) + "_" + std::string(to_string(c)) + "_" + buf;
}

namespace {

constexpr double kEdgeWidth = 0.6;  // pixels

// Soft indicator of an axis-aligned ellipse in normalized coordinates.
struct Ellipse {
  double x0, y0, ax, ay;  // centre and semi-axes, normalized units
  double px_per_unit;     // to express the signed distance in pixels

  double rho(double x, double y) const {
    const double dx = (x - x0) / ax;
    const double dy = (y - y0) / ay;
    return dx * dx + dy * dy;
  }
  double inside(double x, double y) const {
    const double d = (std::sqrt(rho(x, y)) - 1.0) * std::min(ax, ay) * px_per_unit;
    if (d > 8.0) return 0.0;
    if (d < -8.0) return 1.0;
    return 1.0 / (1.0 + std::exp(d / kEdgeWidth));
  }
};

struct Lesion {
  int slice;
  double row, col, radius;
};

struct Anatomy {
  double center_row, center_col;
  double head_ax, head_ay;  // normalized semi-axes
  double ventricle_scale;
  std::array<double, 6> phase_poly;
  double phase_slice_slope;
  std::array<std::array<double, 4>, 4> texture;  // (fx, fy, phase, amplitude)
};

Anatomy draw_anatomy(const PhantomSpec& spec, Rng& rng) {
  Anatomy a{};
  a.center_row = (static_cast<double>(spec.rows) - 1.0) / 2.0 + uniform(rng, -0.03, 0.03) * spec.rows / 2.0;
  a.center_col = (static_cast<double>(spec.cols) - 1.0) / 2.0;
  a.head_ax = uniform(rng, 0.68, 0.74);
  a.head_ay = uniform(rng, 0.80, 0.86);
  a.ventricle_scale = uniform(rng, 0.8, 1.2);
  a.phase_poly = {uniform(rng, -std::numbers::pi, std::numbers::pi), uniform(rng, -1.0, 1.0),
                  uniform(rng, -1.0, 1.0), uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5),
                  uniform(rng, -0.5, 0.5)};
  a.phase_slice_slope = uniform(rng, -0.3, 0.3);
  for (auto& t : a.texture) {
    t = {uniform(rng, 3.0, 10.0), uniform(rng, 3.0, 10.0), uniform(rng, 0.0, 2.0 * std::numbers::pi),
         uniform(rng, 0.005, 0.012)};
  }
  return a;
}

double slice_scale(std::size_t s, std::size_t slices) {
  return 0.86 + 0.14 * std::sin(std::numbers::pi * (static_cast<double>(s) + 0.5) /
                                static_cast<double>(slices));
}

struct SliceGeometry {
  Ellipse outer, skull_inner, brain, white;
  std::array<Ellipse, 2> deep, ventricle;
};

SliceGeometry slice_geometry(const Anatomy& a, double f, double px_per_unit) {
  auto head = [&](double k) { return Ellipse{0.0, 0.0, a.head_ax * k * f, a.head_ay * k * f, px_per_unit}; };
  SliceGeometry g{head(1.0), head(0.92), head(0.87), head(0.74), {}, {}};
  for (int side = 0; side < 2; ++side) {
    const double sx = side == 0 ? -1.0 : 1.0;
    g.deep[side] = {sx * 0.16 * f, 0.02 * f, 0.07 * f, 0.10 * f, px_per_unit};
    g.ventricle[side] = {sx * 0.07 * f, -0.06 * f, 0.035 * f * a.ventricle_scale,
                         0.17 * f * a.ventricle_scale, px_per_unit};
  }
  return g;
}

std::vector<Lesion> draw_lesions(const PhantomSpec& spec, const Anatomy& a, Rng& rng) {
  std::vector<Lesion> lesions;
  const int count = uniform_int(rng, 1, spec.lesion.max_lesions);
  const double half_r = static_cast<double>(spec.rows) / 2.0;
  const double half_c = static_cast<double>(spec.cols) / 2.0;
  const std::size_t s_lo = spec.slices / 4;
  const std::size_t s_hi = std::max(s_lo + 1, (3 * spec.slices + 3) / 4);
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 500; ++attempt) {
      const int s = uniform_int(rng, static_cast<int>(s_lo), static_cast<int>(s_hi) - 1);
      const double f = slice_scale(static_cast<std::size_t>(s), spec.slices);
      const double radius = uniform(rng, spec.lesion.radius_min, spec.lesion.radius_max);
      const double u = uniform(rng, -1.0, 1.0);
      const double v = uniform(rng, -1.0, 1.0);
      if (u * u + v * v > 1.0) continue;
      const Ellipse brain{0.0, 0.0, a.head_ax * 0.87 * f, a.head_ay * 0.87 * f, half_c};
      const double row = a.center_row + v * 0.65 * brain.ay * half_r;
      const double col = a.center_col + u * 0.65 * brain.ax * half_c;
      // Keep the mirror image of the box free of lesion tissue.
      if (std::abs(col - a.center_col) < radius + 4.0) continue;
      bool inside = true;
      for (double dr : {-radius - 1.0, radius + 1.0}) {
        for (double dc : {-radius - 1.0, radius + 1.0}) {
          inside = inside && brain.rho((col + dc - a.center_col) / half_c,
                                       (row + dr - a.center_row) / half_r) < 1.0;
        }
      }
      if (!inside) continue;
      lesions.push_back({s, row, col, radius});
      break;
    }
  }
  return lesions;
}

BoundingBox lesion_box(const Lesion& l) {
  return {l.slice, static_cast<int>(std::ceil(l.row - l.radius)),
          static_cast<int>(std::ceil(l.col - l.radius)),
          static_cast<int>(std::floor(l.row + l.radius)) + 1,
          static_cast<int>(std::floor(l.col + l.radius)) + 1};
}

// Standard normal pairs (polar method) over a splitmix64 counter stream.
class NormalPairs {
 public:
  explicit NormalPairs(std::uint64_t seed) : counter_(seed) {}

  Complex next() {
    for (;;) {
      const double u = 2.0 * unit() - 1.0;
      const double v = 2.0 * unit() - 1.0;
      const double s = u * u + v * v;
      if (s >= 1.0 || s == 0.0) continue;
      const double f = std::sqrt(-2.0 * std::log(s) / s);
      return {u * f, v * f};
    }
  }

 private:
  double unit() { return static_cast<double>(mix64(counter_++) >> 11) * 0x1.0p-53; }

  std::uint64_t counter_;
};

std::vector<ComplexField> draw_coil_maps(const PhantomSpec& spec, const Anatomy& a, Rng& rng) {
  struct Coil {
    double angle, width, phase;
  };
  std::vector<Coil> coils(spec.coils);
  for (std::size_t c = 0; c < spec.coils; ++c) {
    coils[c] = {2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(spec.coils) +
                    uniform(rng, -0.2, 0.2),
                uniform(rng, 0.8, 1.0), uniform(rng, -0.6, 0.6)};
  }
  std::vector<ComplexField> maps(spec.coils, ComplexField(spec.rows, spec.cols));
  const double half_r = static_cast<double>(spec.rows) / 2.0;
  const double half_c = static_cast<double>(spec.cols) / 2.0;
  std::vector<Complex> raw(spec.coils);
  for (std::size_t r = 0; r < spec.rows; ++r) {
    const double y = (static_cast<double>(r) - a.center_row) / half_r;
    for (std::size_t col = 0; col < spec.cols; ++col) {
      const double x = (static_cast<double>(col) - a.center_col) / half_c;
      double sos = 0.0;
      Complex sum{};
      for (std::size_t c = 0; c < spec.coils; ++c) {
        const double px = 1.25 * std::cos(coils[c].angle);
        const double py = 1.25 * std::sin(coils[c].angle);
        const double d2 = (x - px) * (x - px) + (y - py) * (y - py);
        const double mag = std::exp(-d2 / (2.0 * coils[c].width * coils[c].width));
        const double ph = coils[c].phase + 0.4 * (x * std::cos(coils[c].angle) + y * std::sin(coils[c].angle));
        raw[c] = std::polar(mag, ph);
        sos += std::norm(raw[c]);
        sum += raw[c];
      }
      // Unit root-sum-of-squares and a real, positive coil sum.
      const Complex unphase = std::conj(sum) / std::abs(sum);
      const double rss = std::sqrt(sos);
      for (std::size_t c = 0; c < spec.coils; ++c) maps[c](r, col) = raw[c] * unphase / rss;
    }
  }
  return maps;
}

}  // namespace

PhantomVolume generate_volume(const PhantomSpec& spec, Sequence sequence, VolumeClass cls,
                              int volume_index) {
  spec.validate();
  if (sequence == Sequence::Null) throw ValidationError("phantom: sequence must be concrete");
  const std::string vid = make_volume_id(spec, sequence, cls, volume_index);
  const SequenceProfile& prof = spec.profiles[static_cast<std::size_t>(sequence)];

  Rng anatomy_rng = make_rng(spec.seed, "phantom/anatomy/" + vid);
  Rng lesion_rng = make_rng(spec.seed, "phantom/lesion/" + vid);
  Rng coil_rng = make_rng(spec.seed, "phantom/coils/" + vid);
  NormalPairs noise(substream_seed(spec.seed, "phantom/noise/" + vid));

  const Anatomy anat = draw_anatomy(spec, anatomy_rng);
  std::vector<Lesion> lesions;
  if (cls == VolumeClass::Abnormal) lesions = draw_lesions(spec, anat, lesion_rng);

  PhantomVolume vol;
  vol.volume_class = cls;
  for (const auto& l : lesions) vol.boxes.push_back(lesion_box(l));
  vol.sensitivities = draw_coil_maps(spec, anat, coil_rng);

  const double half_r = static_cast<double>(spec.rows) / 2.0;
  const double half_c = static_cast<double>(spec.cols) / 2.0;
  const auto& p = anat.phase_poly;

  // Texture and background phase do not change between slices.
  RealImage texture(spec.rows, spec.cols), base_phase(spec.rows, spec.cols);
  for (std::size_t r = 0; r < spec.rows; ++r) {
    const double y = (static_cast<double>(r) - anat.center_row) / half_r;
    for (std::size_t c = 0; c < spec.cols; ++c) {
      const double x = (static_cast<double>(c) - anat.center_col) / half_c;
      double tex = 0.0;
      for (const auto& t : anat.texture) tex += t[3] * std::sin(t[0] * x + t[1] * y + t[2]);
      texture(r, c) = tex;
      base_phase(r, c) = prof.phase_offset + p[0] + p[1] * x + p[2] * y + p[3] * x * x + p[4] * x * y + p[5] * y * y;
    }
  }

  for (std::size_t s = 0; s < spec.slices; ++s) {
    const double f = slice_scale(s, spec.slices);
    const SliceGeometry g = slice_geometry(anat, f, half_c);
    ComplexField obj(spec.rows, spec.cols);
    Mask brain_region(spec.rows, spec.cols, 0);
    const double slice_phase = anat.phase_slice_slope * (static_cast<double>(s) -
                                                          static_cast<double>(spec.slices) / 2.0) /
                               static_cast<double>(spec.slices);
    for (std::size_t r = 0; r < spec.rows; ++r) {
      const double y = (static_cast<double>(r) - anat.center_row) / half_r;
      for (std::size_t c = 0; c < spec.cols; ++c) {
        const double x = (static_cast<double>(c) - anat.center_col) / half_c;
        const double in_outer = g.outer.inside(x, y);
        if (in_outer == 0.0) continue;
        const double in_skull = g.skull_inner.inside(x, y);
        const double in_brain = g.brain.inside(x, y);
        const double in_white = g.white.inside(x, y);
        brain_region(r, c) = g.brain.rho(x, y) < 1.0 ? 1 : 0;

        double m = prof.skull * (in_outer - in_skull) + prof.csf * (in_skull - in_brain) +
                   prof.gray * (in_brain - in_white) + prof.white * in_white;
        for (int side = 0; side < 2; ++side) {
          m += (prof.deep - prof.white) * g.deep[side].inside(x, y) * in_white;
          m += (prof.csf - prof.white) * g.ventricle[side].inside(x, y) * in_white;
        }
        m += texture(r, c) * in_brain;

        double phase = base_phase(r, c) + slice_phase;
        for (const auto& l : lesions) {
          if (l.slice != static_cast<int>(s)) continue;
          const double dr = static_cast<double>(r) - l.row;
          const double dc = static_cast<double>(c) - l.col;
          const double dist = std::sqrt(dr * dr + dc * dc);
          const double core = 1.0 / (1.0 + std::exp((dist - l.radius) / kEdgeWidth));
          m += spec.lesion.contrast * core;
          const double sigma = 0.6 * l.radius;
          phase -= spec.lesion.phase_amplitude * std::exp(-dist * dist / (2.0 * sigma * sigma));
        }
        obj(r, c) = std::polar(std::max(m, 0.0), phase);
      }
    }
    vol.ground_truth.push_back(std::move(obj));
    vol.brain_regions.push_back(std::move(brain_region));
  }

  KSpaceStack ks(spec.coils, spec.slices, spec.rows, spec.cols);
  ks.sequence = sequence;
  ks.volume_id = vid;
  std::vector<ComplexField> coil_k;
  coil_k.reserve(spec.coils * spec.slices);
  double signal_energy = 0.0;
  for (std::size_t c = 0; c < spec.coils; ++c) {
    for (std::size_t s = 0; s < spec.slices; ++s) {
      ComplexField img(spec.rows, spec.cols);
      for (std::size_t i = 0; i < img.size(); ++i) img[i] = vol.sensitivities[c][i] * vol.ground_truth[s][i];
      coil_k.push_back(fft2c(img));
      for (const auto& v : coil_k.back()) signal_energy += std::norm(v);
    }
  }
  const double samples = static_cast<double>(spec.coils * spec.slices * spec.rows * spec.cols);
  const double noise_power = signal_energy / samples / std::pow(10.0, spec.snr_db / 10.0);
  const double component_std = std::sqrt(noise_power / 2.0);
  for (std::size_t c = 0; c < spec.coils; ++c) {
    for (std::size_t s = 0; s < spec.slices; ++s) {
      ComplexField& k = coil_k[c * spec.slices + s];
      for (auto& v : k) v += component_std * noise.next();
      ks.set_slice_kspace(c, s, k);
    }
  }
  vol.kspace = std::move(ks);
  return vol;
}

}  // namespace cmri

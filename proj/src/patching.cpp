#include "cmri/patching.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>

#include "cmri/error.hpp"
#include "cmri/ingest.hpp"
#include "cmri/metrics.hpp"

namespace cmri {

ComplexField PatchRecord::field() const {
  if (data.size() != kPatchValues) throw std::invalid_argument("PatchRecord: bad data size");
  ComplexField out(kPatchSize, kPatchSize);
  constexpr std::size_t plane = kPatchSize * kPatchSize;
  for (std::size_t i = 0; i < plane; ++i) out[i] = Complex(data[i], data[plane + i]);
  return out;
}

std::vector<float> cut_patch(const ComplexField& slice, int row, int col) {
  if (row < 0 || col < 0 || row + kPatchSize > static_cast<int>(slice.rows()) ||
      col + kPatchSize > static_cast<int>(slice.cols())) {
    throw std::invalid_argument("cut_patch: window outside slice");
  }
  std::vector<float> out(kPatchValues);
  constexpr std::size_t plane = kPatchSize * kPatchSize;
  for (int r = 0; r < kPatchSize; ++r) {
    for (int c = 0; c < kPatchSize; ++c) {
      const Complex v = slice(static_cast<std::size_t>(row + r), static_cast<std::size_t>(col + c));
      out[static_cast<std::size_t>(r * kPatchSize + c)] = static_cast<float>(v.real());
      out[plane + static_cast<std::size_t>(r * kPatchSize + c)] = static_cast<float>(v.imag());
    }
  }
  return out;
}

Mask brain_mask(const RealImage& mag) {
  Mask mask(mag.rows(), mag.cols(), 0);
  constexpr int kBins = 256;
  std::array<double, kBins> hist{};
  bool any = false;
  for (double v : mag) {
    const double x = std::clamp(v, 0.0, 1.0);
    any = any || x > 0.0;
    hist[static_cast<std::size_t>(std::min(kBins - 1, static_cast<int>(x * kBins)))] += 1.0;
  }
  if (!any) return mask;

  // Otsu: maximize the between-class variance over bin boundaries.
  const double total = static_cast<double>(mag.size());
  double sum_all = 0.0;
  for (int b = 0; b < kBins; ++b) sum_all += (b + 0.5) * hist[static_cast<std::size_t>(b)];
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_bin = 0;
  for (int b = 0; b < kBins - 1; ++b) {
    w0 += hist[static_cast<std::size_t>(b)];
    sum0 += (b + 0.5) * hist[static_cast<std::size_t>(b)];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0;
    const double m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = b;
    }
  }
  const double threshold = static_cast<double>(best_bin + 1) / kBins;

  const std::size_t rows = mag.rows();
  const std::size_t cols = mag.cols();
  Mask fg(rows, cols, 0);
  for (std::size_t i = 0; i < mag.size(); ++i) fg[i] = mag[i] >= threshold ? 1 : 0;

  // Largest 4-connected component; the earliest in raster order wins ties.
  Grid<int> label(rows, cols, 0);
  int best_label = 0;
  std::size_t best_size = 0;
  int next = 0;
  std::deque<std::size_t> queue;
  for (std::size_t start = 0; start < fg.size(); ++start) {
    if (!fg[start] || label[start] != 0) continue;
    ++next;
    std::size_t size = 0;
    label[start] = next;
    queue.push_back(start);
    while (!queue.empty()) {
      const std::size_t i = queue.front();
      queue.pop_front();
      ++size;
      const std::size_t r = i / cols, c = i % cols;
      auto visit = [&](std::size_t j) {
        if (fg[j] && label[j] == 0) {
          label[j] = next;
          queue.push_back(j);
        }
      };
      if (r > 0) visit(i - cols);
      if (r + 1 < rows) visit(i + cols);
      if (c > 0) visit(i - 1);
      if (c + 1 < cols) visit(i + 1);
    }
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
  }
  if (best_label == 0) return mask;

  // Holes: background pixels not reachable from the border.
  Mask outside(rows, cols, 0);
  auto seed = [&](std::size_t i) {
    if (label[i] != best_label && !outside[i]) {
      outside[i] = 1;
      queue.push_back(i);
    }
  };
  for (std::size_t c = 0; c < cols; ++c) {
    seed(c);
    seed((rows - 1) * cols + c);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    seed(r * cols);
    seed(r * cols + cols - 1);
  }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    const std::size_t r = i / cols, c = i % cols;
    if (r > 0) seed(i - cols);
    if (r + 1 < rows) seed(i + cols);
    if (c > 0) seed(i - 1);
    if (c + 1 < cols) seed(i + 1);
  }
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = outside[i] ? 0 : 1;
  return mask;
}

PreparedVolume prepare_volume(const KSpaceStack& kspace, VolumeClass cls,
                              std::vector<BoundingBox> boxes, std::size_t resize_to) {
  PreparedVolume vol;
  vol.volume_id = kspace.volume_id;
  vol.sequence = kspace.sequence;
  vol.volume_class = cls;
  vol.boxes = std::move(boxes);
  vol.slices = reconstruct_volume(kspace, resize_to);
  vol.masks.reserve(vol.slices.size());
  for (const auto& s : vol.slices) vol.masks.push_back(brain_mask(magnitude(s)));
  return vol;
}

double mask_coverage(const Mask& mask, int row, int col) {
  std::size_t inside = 0;
  for (int r = row; r < row + kPatchSize; ++r) {
    for (int c = col; c < col + kPatchSize; ++c) {
      inside += mask(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) ? 1 : 0;
    }
  }
  return static_cast<double>(inside) / static_cast<double>(kPatchSize * kPatchSize);
}

int patches_for_box(int box_area, const PatchingOptions& opt) {
  const double n = std::round(opt.patches_per_patch_area * box_area /
                              static_cast<double>(kPatchSize * kPatchSize));
  return std::clamp(static_cast<int>(n), opt.min_per_box, opt.max_per_box);
}

namespace {

// Per-slice table of window coverage, answering the mask rule in O(1).
class CoverageTable {
 public:
  explicit CoverageTable(const Mask& mask)
      : rows_(static_cast<int>(mask.rows())), cols_(static_cast<int>(mask.cols())),
        sums_(static_cast<std::size_t>((rows_ + 1) * (cols_ + 1)), 0) {
    for (int r = 0; r < rows_; ++r) {
      int row_sum = 0;
      for (int c = 0; c < cols_; ++c) {
        row_sum += mask(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) ? 1 : 0;
        at(r + 1, c + 1) = at(r, c + 1) + row_sum;
      }
    }
  }
  bool fits(int row, int col) const {
    return row >= 0 && col >= 0 && row + kPatchSize <= rows_ && col + kPatchSize <= cols_;
  }
  double coverage(int row, int col) const {
    const int s = at(row + kPatchSize, col + kPatchSize) - at(row, col + kPatchSize) -
                  at(row + kPatchSize, col) + at(row, col);
    return static_cast<double>(s) / static_cast<double>(kPatchSize * kPatchSize);
  }
  int rows() const { return rows_; }
  int cols() const { return cols_; }

 private:
  int& at(int r, int c) { return sums_[static_cast<std::size_t>(r * (cols_ + 1) + c)]; }
  int at(int r, int c) const { return sums_[static_cast<std::size_t>(r * (cols_ + 1) + c)]; }
  int rows_, cols_;
  std::vector<int> sums_;
};

struct Placement {
  int slice, row, col;
};

std::vector<Placement> valid_placements(const std::vector<CoverageTable>& tables, double min_cov) {
  std::vector<Placement> out;
  for (std::size_t s = 0; s < tables.size(); ++s) {
    const auto& t = tables[s];
    for (int r = 0; r + kPatchSize <= t.rows(); ++r) {
      for (int c = 0; c + kPatchSize <= t.cols(); ++c) {
        if (t.coverage(r, c) >= min_cov) out.push_back({static_cast<int>(s), r, c});
      }
    }
  }
  return out;
}

PatchRecord make_record(const PreparedVolume& v, const Placement& p, Abnormality label,
                        double overlap) {
  PatchRecord rec;
  rec.data = cut_patch(v.slices[static_cast<std::size_t>(p.slice)], p.row, p.col);
  rec.condition = {v.sequence, label};
  rec.volume_id = v.volume_id;
  rec.volume_class = v.volume_class;
  rec.slice_index = p.slice;
  rec.row = p.row;
  rec.col = p.col;
  rec.overlap_fraction = overlap;
  return rec;
}

std::vector<CoverageTable> coverage_tables(const PreparedVolume& v) {
  std::vector<CoverageTable> tables;
  tables.reserve(v.masks.size());
  for (const auto& m : v.masks) tables.emplace_back(m);
  return tables;
}

}  // namespace

ExtractionResult extract_labeled_patches(const PreparedVolume& volume, Rng& rng,
                                         const PatchingOptions& opt) {
  ExtractionResult result;
  const auto tables = coverage_tables(volume);
  for (const auto& box : volume.boxes) {
    if (box.slice < 0 || box.slice >= static_cast<int>(volume.slices.size())) {
      throw std::invalid_argument("extract_labeled_patches: box slice out of range");
    }
    const auto& t = tables[static_cast<std::size_t>(box.slice)];
    if (box.row1 - box.row0 > t.rows() || box.col1 - box.col0 > t.cols() || box.area() <= 0) {
      throw std::invalid_argument("extract_labeled_patches: box larger than slice");
    }
  }

  std::vector<PatchRecord> abnormal;
  for (std::size_t b = 0; b < volume.boxes.size(); ++b) {
    const BoundingBox& box = volume.boxes[b];
    const auto& table = tables[static_cast<std::size_t>(box.slice)];
    const int wanted = patches_for_box(box.area(), opt);
    int made = 0;
    for (int i = 0; i < wanted; ++i) {
      bool placed = false;
      for (int attempt = 0; attempt < opt.max_attempts && !placed; ++attempt) {
        // Any window that touches the box; the overlap rule decides.
        const int row = uniform_int(rng, box.row0 - kPatchSize + 1, box.row1 - 1);
        const int col = uniform_int(rng, box.col0 - kPatchSize + 1, box.col1 - 1);
        if (!table.fits(row, col)) continue;
        const double overlap =
            static_cast<double>(intersection_area(box, row, col, kPatchSize)) / box.area();
        if (overlap < opt.min_box_overlap || table.coverage(row, col) < opt.min_mask_coverage) continue;
        abnormal.push_back(make_record(volume, {box.slice, row, col}, Abnormality::Abnormal, overlap));
        placed = true;
      }
      if (placed) ++made;
    }
    if (made < wanted) {
      result.warnings.push_back(volume.volume_id + ": box " + std::to_string(b) + " placed " +
                                std::to_string(made) + " of " + std::to_string(wanted) + " patches");
    }
  }

  // At most half of the volume budget goes to abnormal patches, so the
  // matching normal patches still fit.
  const std::size_t abnormal_cap = static_cast<std::size_t>(opt.max_per_volume / 2);
  if (abnormal.size() > abnormal_cap) {
    std::shuffle(abnormal.begin(), abnormal.end(), rng);
    abnormal.resize(abnormal_cap);
  }
  const int n_abnormal = static_cast<int>(abnormal.size());
  const int n_normal = std::max(n_abnormal, opt.min_per_volume - n_abnormal);

  std::vector<PatchRecord> normal;
  const auto placements = valid_placements(tables, opt.min_mask_coverage);
  if (!placements.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, placements.size() - 1);
    for (int i = 0; i < n_normal; ++i) {
      for (int attempt = 0; attempt < opt.max_attempts; ++attempt) {
        const Placement p = placements[pick(rng)];
        const bool touches = std::any_of(volume.boxes.begin(), volume.boxes.end(), [&](const auto& b) {
          return b.slice == p.slice && intersection_area(b, p.row, p.col, kPatchSize) > 0;
        });
        if (touches) continue;
        normal.push_back(make_record(volume, p, Abnormality::Normal, 0.0));
        break;
      }
    }
  }
  if (static_cast<int>(normal.size()) < n_normal) {
    result.warnings.push_back(volume.volume_id + ": placed " + std::to_string(normal.size()) +
                              " of " + std::to_string(n_normal) + " normal patches");
  }
  result.patches = std::move(abnormal);
  result.patches.insert(result.patches.end(), std::make_move_iterator(normal.begin()),
                        std::make_move_iterator(normal.end()));
  return result;
}

ExtractionResult extract_random_patches(const PreparedVolume& volume, Rng& rng, int n,
                                        const PatchingOptions& opt) {
  if (n < opt.min_per_volume || n > opt.max_per_volume) {
    throw std::invalid_argument("extract_random_patches: n outside the per-volume bounds");
  }
  ExtractionResult result;
  const auto placements = valid_placements(coverage_tables(volume), opt.min_mask_coverage);
  if (placements.empty()) {
    result.warnings.push_back(volume.volume_id + ": no valid patch placement");
    return result;
  }
  std::uniform_int_distribution<std::size_t> pick(0, placements.size() - 1);
  const Abnormality label = default_abnormality(volume.volume_class);
  for (int i = 0; i < n; ++i) result.patches.push_back(make_record(volume, placements[pick(rng)], label, 0.0));
  return result;
}

std::vector<PatchRecord> extract_grid_patches(const ComplexField& slice, ConditionLabel condition,
                                              const std::string& volume_id, int slice_index,
                                              VolumeClass volume_class) {
  if (slice.rows() != 320 || slice.cols() != 320) {
    throw std::invalid_argument("extract_grid_patches: slice must be 320x320");
  }
  std::vector<PatchRecord> out;
  for (const auto& [row, col] : kGridRetained) {
    PatchRecord rec;
    rec.data = cut_patch(slice, row, col);
    rec.condition = condition;
    rec.volume_id = volume_id;
    rec.volume_class = volume_class;
    rec.slice_index = slice_index;
    rec.row = row;
    rec.col = col;
    out.push_back(std::move(rec));
  }
  return out;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split SplitManifest::of(const std::string& volume_id) const {
  auto it = assignment.find(volume_id);
  if (it == assignment.end()) throw std::out_of_range("volume not in manifest: " + volume_id);
  return it->second;
}

SplitManifest split_volumes(std::span<const VolumeLabel> volumes, std::uint64_t seed) {
  SplitManifest manifest;
  manifest.seed = seed;
  std::map<std::pair<int, int>, std::vector<std::string>> groups;
  for (const auto& v : volumes) {
    groups[{static_cast<int>(v.volume_class), static_cast<int>(v.sequence)}].push_back(v.volume_id);
  }
  for (auto& [key, ids] : groups) {
    const auto cls = static_cast<VolumeClass>(key.first);
    const auto seq = static_cast<Sequence>(key.second);
    const bool labeled = cls != VolumeClass::Unlabeled;
    const std::size_t n = ids.size();
    if (labeled && n < 3) {
      throw ValidationError("split_volumes: too few volumes in group " + std::string(to_string(seq)) +
                            "/" + std::string(to_string(cls)) + " (need at least 3)");
    }
    const SplitRatios ratios = labeled ? kLabeledRatios : kUnlabeledRatios;
    auto count = [&](double ratio) {
      const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
      return n >= 3 ? std::max<std::size_t>(1, k) : std::size_t{0};
    };
    const std::size_t n_val = count(ratios.validation);
    const std::size_t n_test = count(ratios.test);

    std::sort(ids.begin(), ids.end());
    Rng rng = make_rng(seed, "split/" + std::string(to_string(seq)) + "/" + std::string(to_string(cls)));
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t i = 0; i < n; ++i) {
      Split s = Split::Train;
      if (i >= n - n_test) s = Split::Test;
      else if (i >= n - n_test - n_val) s = Split::Validation;
      manifest.assignment[ids[i]] = s;
    }
  }
  return manifest;
}

}  // namespace cmri

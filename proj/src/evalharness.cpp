#include "cmri/evalharness.hpp"

#include <algorithm>
#include <cmath>

#include "cmri/error.hpp"
#include "cmri/metrics.hpp"
#include "cmri/rng.hpp"
#include "cmri/tensor_io.hpp"

namespace cmri {

DiscriminatorResult train_discriminator(const torch::Tensor& real_train, const torch::Tensor& synth_train,
                                        const torch::Tensor& real_test,
                                        const std::vector<torch::Tensor>& synth_tests,
                                        const ClassifierTrainConfig& config, ClassifierInput input) {
  if (synth_tests.empty()) throw std::invalid_argument("train_discriminator: no synthetic test sets");
  const torch::Tensor x = torch::cat({real_train, synth_train}, 0);
  std::vector<int> y(static_cast<std::size_t>(real_train.size(0)), 0);
  y.resize(static_cast<std::size_t>(x.size(0)), 1);

  DiscriminatorResult res;
  std::vector<double> all;
  for (const std::uint64_t seed : config.seeds) {
    TrainedClassifier c = train_classifier(x, y, input, config, seed);
    std::vector<double> row;
    for (const auto& synth : synth_tests) {
      const std::vector<double> scores = predict(c, torch::cat({real_test, synth}, 0));
      std::vector<int> labels(static_cast<std::size_t>(real_test.size(0)), 0);
      labels.resize(scores.size(), 1);
      row.push_back(auroc(scores, labels));
      all.push_back(row.back());
    }
    res.seeds.push_back(seed);
    res.auroc.push_back(std::move(row));
  }
  const MeanStd ms = mean_std(all);
  res.mean = ms.mean;
  res.std = ms.std;
  return res;
}

// ---- compositions ---------------------------------------------------------------------

void check_fraction(double f) {
  if (!(f >= 0.0 && f <= 1.0) || std::abs(f * 10.0 - std::round(f * 10.0)) > 1e-9) {
    throw std::invalid_argument("fraction must be a multiple of 0.1 in [0, 1], got " + std::to_string(f));
  }
}

namespace {

PatchGroup patch_group(const RecordMeta& m) { return {m.condition.sequence, m.condition.abnormality}; }

std::size_t count_of(double f, std::size_t n) {
  return static_cast<std::size_t>(std::llround(f * static_cast<double>(n)));
}

}  // namespace

CompositionPlan::CompositionPlan(const RecordSet& real, std::uint64_t seed) : real_(&real) {
  std::map<std::pair<Sequence, VolumeClass>, std::set<std::string>> volumes;
  for (const auto& m : real.meta) {
    if (m.volume_class == VolumeClass::Unlabeled ||
        (m.condition.abnormality != Abnormality::Normal && m.condition.abnormality != Abnormality::Abnormal)) {
      throw ValidationError("composition: real training patches must carry class labels (" + m.volume_id + ")");
    }
    volumes[{m.condition.sequence, m.volume_class}].insert(m.volume_id);
    ++real_count_[patch_group(m)];
  }
  for (auto& [key, ids] : volumes) {
    std::vector<std::string> order(ids.begin(), ids.end());
    Rng rng = make_rng(seed, "composition/" + std::string(to_string(key.first)) + "/" + std::string(to_string(key.second)));
    std::shuffle(order.begin(), order.end(), rng);
    order_[key] = std::move(order);
  }
}

std::set<std::string> CompositionPlan::real_volumes(double fraction) const {
  check_fraction(fraction);
  std::set<std::string> keep;
  for (const auto& [key, order] : order_) {
    const std::size_t k = count_of(fraction, order.size());
    keep.insert(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return keep;
}

std::map<PatchGroup, std::size_t> CompositionPlan::pool_requirement() const { return real_count_; }

Composition CompositionPlan::take_synthetic(Composition c, const std::map<PatchGroup, std::size_t>& need,
                                            const RecordSet& synthetic) const {
  std::map<PatchGroup, std::size_t> left = need;
  for (std::size_t i = 0; i < synthetic.size(); ++i) {
    auto it = left.find(patch_group(synthetic.meta[i]));
    if (it == left.end() || it->second == 0) continue;
    c.synthetic.push_back(i);
    --it->second;
  }
  for (const auto& [g, n] : left) {
    if (n > 0) {
      throw ValidationError("synthetic pool is short by " + std::to_string(n) + " patches for " +
                            std::string(to_string(g.first)) + "/" + std::string(to_string(g.second)));
    }
  }
  return c;
}

Composition CompositionPlan::substitution(double fraction, const RecordSet& synthetic) const {
  const std::set<std::string> keep = real_volumes(fraction);
  Composition c;
  std::map<PatchGroup, std::size_t> removed;
  for (std::size_t i = 0; i < real_->size(); ++i) {
    const RecordMeta& m = real_->meta[i];
    if (keep.count(m.volume_id) != 0) {
      c.real.push_back(i);
    } else {
      ++removed[patch_group(m)];
    }
  }
  return take_synthetic(std::move(c), removed, synthetic);
}

Composition CompositionPlan::additive(double fraction, const RecordSet& synthetic) const {
  check_fraction(fraction);
  Composition c;
  c.real.resize(real_->size());
  for (std::size_t i = 0; i < c.real.size(); ++i) c.real[i] = i;
  std::map<PatchGroup, std::size_t> need;
  for (const auto& [g, n] : real_count_) need[g] = count_of(fraction, n);
  return take_synthetic(std::move(c), need, synthetic);
}

std::vector<int> abnormality_targets(const RecordSet& set, std::span<const std::size_t> indices) {
  std::vector<int> y;
  y.reserve(indices.size());
  for (const std::size_t i : indices) {
    const Abnormality a = set.meta[i].condition.abnormality;
    if (a != Abnormality::Normal && a != Abnormality::Abnormal) {
      throw ValidationError("patch " + std::to_string(i) + " has no class label");
    }
    y.push_back(a == Abnormality::Abnormal ? 1 : 0);
  }
  return y;
}

// ---- downstream runs ------------------------------------------------------------------------

namespace {

std::vector<std::size_t> all_indices(const RecordSet& s) {
  std::vector<std::size_t> v(s.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

std::string composition_key(const Composition& c, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto add = [&](std::uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ULL;
  };
  for (const auto i : c.real) add(i);
  add(~0ULL);
  for (const auto i : c.synthetic) add(i);
  return std::to_string(seed) + "/" + std::to_string(c.real.size()) + "/" + std::to_string(c.synthetic.size()) + "/" +
         std::to_string(h);
}

}  // namespace

DownstreamRunner::DownstreamRunner(const DownstreamData& data, const ClassifierTrainConfig& config)
    : data_(data), config_(config) {
  const auto idx = all_indices(data.test);
  test_x_ = stack_records(data.test);
  test_y_ = abnormality_targets(data.test, idx);
  if (data.external) external_x_ = stack_records(*data.external);
}

std::vector<std::pair<std::string, double>> DownstreamRunner::evaluate(const Composition& c, std::uint64_t seed) {
  std::vector<int> y = abnormality_targets(data_.train, c.real);
  const std::vector<int> ys = abnormality_targets(data_.synthetic, c.synthetic);
  y.insert(y.end(), ys.begin(), ys.end());
  std::vector<torch::Tensor> parts;
  if (!c.real.empty()) parts.push_back(stack_records(data_.train, c.real));
  if (!c.synthetic.empty()) parts.push_back(stack_records(data_.synthetic, c.synthetic));
  if (parts.empty()) throw std::invalid_argument("downstream: empty training set");
  TrainedClassifier clf = train_classifier(torch::cat(parts, 0), y, ClassifierInput::Patch, config_, seed);
  ++trained_;

  std::vector<std::pair<std::string, double>> out;
  out.emplace_back("test", auroc(predict(clf, test_x_), test_y_));
  if (data_.external) {
    const std::vector<double> p = predict(clf, external_x_);
    std::map<std::string, std::pair<int, std::vector<double>>> volumes;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const RecordMeta& m = data_.external->meta[i];
      if (m.volume_class == VolumeClass::Unlabeled) continue;
      auto& v = volumes[m.volume_id];
      v.first = m.volume_class == VolumeClass::Abnormal ? 1 : 0;
      v.second.push_back(p[i]);
    }
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& [id, v] : volumes) {
      scores.push_back(aggregate_volume(v.second));
      labels.push_back(v.first);
    }
    const bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
    if (both) out.emplace_back("external", auroc(scores, labels));
  }
  return out;
}

std::vector<AurocRow> DownstreamRunner::run(const Composition& c, const std::string& experiment, double fraction,
                                            const std::string& condition) {
  std::vector<AurocRow> rows;
  const std::vector<int> y = [&] {
    std::vector<int> a = abnormality_targets(data_.train, c.real);
    const std::vector<int> b = abnormality_targets(data_.synthetic, c.synthetic);
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }();
  if (std::count(y.begin(), y.end(), 0) == 0 || std::count(y.begin(), y.end(), 1) == 0) {
    if (progress) progress("warning: skipping " + experiment + " " + condition + " at " + std::to_string(fraction) +
                           ": training set lacks a class");
    return rows;
  }
  for (const std::uint64_t seed : config_.seeds) {
    const std::string key = composition_key(c, seed);
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      it = cache_.emplace(key, evaluate(c, seed)).first;
      if (progress) {
        progress(experiment + " " + condition + " f=" + std::to_string(fraction) + " seed " + std::to_string(seed) +
                 " test AUROC " + std::to_string(it->second.front().second));
      }
    }
    for (const auto& [split, value] : it->second) {
      rows.push_back({experiment, fraction, condition, seed, split, value});
    }
  }
  return rows;
}

std::vector<AurocRow> run_substitution(const CompositionPlan& plan, DownstreamRunner& runner,
                                       const DownstreamData& data, std::span<const double> fractions) {
  std::vector<AurocRow> rows = runner.run(plan.substitution(1.0, data.synthetic), "baseline", 1.0, "real_only");
  for (const double f : fractions) {
    const Composition c = plan.substitution(f, data.synthetic);
    if (!c.real.empty()) {
      auto r = runner.run(Composition{c.real, {}}, "substitution", f, "real_only");
      rows.insert(rows.end(), r.begin(), r.end());
    }
    auto r = runner.run(c, "substitution", f, "real_synthetic");
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

std::vector<AurocRow> run_additive(const CompositionPlan& plan, DownstreamRunner& runner, const DownstreamData& data,
                                   std::span<const double> fractions) {
  std::vector<AurocRow> rows = runner.run(plan.additive(0.0, data.synthetic), "baseline", 1.0, "real_only");
  for (const double f : fractions) {
    auto r = runner.run(plan.additive(f, data.synthetic), "additive", f, "real_synthetic");
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

}  // namespace cmri

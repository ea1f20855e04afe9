// Acceptance run: property suites plus a fresh desk-scale pipeline run.
// Prints one PASS/FAIL line per criterion; exits non-zero when any fails.

#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "cmri/cvae.hpp"
#include "cmri/evalharness.hpp"
#include "cmri/flowmatch.hpp"
#include "cmri/ingest.hpp"
#include "cmri/metrics.hpp"
#include "cmri/patching.hpp"
#include "pipeline_common.hpp"

using namespace cmri;
using namespace cmri::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

ComplexField random_field(Rng& rng, std::size_t n) {
  ComplexField f(n, n);
  std::normal_distribution<double> g;
  for (std::size_t i = 0; i < f.size(); ++i) f.data()[i] = {g(rng), g(rng)};
  return f;
}

// ---- 1. metrics -------------------------------------------------------------------

void criterion_metrics(Verdict& v) {
  const auto t0 = Clock::now();
  Rng rng = make_rng(1, "acceptance/metrics");
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const ComplexField x = random_field(rng, 24 + static_cast<std::size_t>(i % 9));
    const ComplexField y = random_field(rng, x.rows());
    ComplexField rotated = x;
    const Complex phase = std::polar(1.0, uniform(rng, -M_PI, M_PI));
    for (std::size_t k = 0; k < rotated.size(); ++k) rotated.data()[k] *= phase;
    worst = std::max(worst, std::abs(phase_coherence(x, x) - 1.0));
    worst = std::max(worst, std::abs(phase_coherence(rotated, y) - phase_coherence(x, y)));
    worst = std::max(worst, std::abs(phase_coherence(x, y) - phase_coherence(y, x)));
  }
  v.require(worst <= 1e-9, "coherence properties, worst deviation " + std::to_string(worst));

  int mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    const int n = uniform_int(rng, 2, 50);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
      s[static_cast<std::size_t>(k)] = std::round(uniform(rng, 0, 1) * 10.0) / 10.0;  // ties on purpose
      y[static_cast<std::size_t>(k)] = k < 1 ? 0 : k < 2 ? 1 : uniform_int(rng, 0, 1);
    }
    long wins2 = 0, pos = 0, neg = 0;
    for (int a = 0; a < n; ++a) {
      if (y[static_cast<std::size_t>(a)] != 1) continue;
      for (int b = 0; b < n; ++b) {
        if (y[static_cast<std::size_t>(b)] != 0) continue;
        const double d = s[static_cast<std::size_t>(a)] - s[static_cast<std::size_t>(b)];
        wins2 += d > 0 ? 2 : d == 0 ? 1 : 0;
      }
    }
    for (int k : y) (k == 1 ? pos : neg)++;
    const double oracle = static_cast<double>(wins2) / (2.0 * static_cast<double>(pos * neg));
    if (auroc(s, y) != oracle) ++mismatches;
  }
  v.require(mismatches == 0, std::to_string(mismatches) + " AUROC mismatches against the pairwise count");
  const double secs = seconds_since(t0);
  v.require(secs < 10.0, "runtime");
  v.detail << "coherence worst " << worst << ", AUROC 100/100 exact, " << fmt(secs, 2) << " s";
}

// ---- 2. sampler ---------------------------------------------------------------------

void criterion_sampler(Verdict& v) {
  const auto t0 = Clock::now();
  double worst_exact = 0.0;
  for (int n : {1, 2, 5, 10, 50}) {
    worst_exact = std::max(worst_exact, std::abs(heun_integrate(0.25, [](double, double) { return -1.5; }, n) + 1.25));
    worst_exact = std::max(worst_exact, std::abs(heun_integrate(0.25, [](double, double t) { return 3.0 * t; }, n) - 1.75));
  }
  // the same on tensors
  const auto x0 = torch::randn({4, 2, 8, 8}, torch::kDouble);
  const auto a = torch::randn({4, 2, 8, 8}, torch::kDouble);
  const auto xt = heun_integrate(x0, [&](const torch::Tensor&, double t) { return a * t; }, 7);
  worst_exact = std::max(worst_exact, (xt - (x0 + 0.5 * a)).abs().max().item<double>());
  v.require(worst_exact <= 1e-12, "exactness " + std::to_string(worst_exact));

  std::vector<double> errors;
  for (int n : {10, 20, 40, 80}) {
    errors.push_back(std::abs(heun_integrate(1.0, [](double x, double) { return x; }, n) - std::exp(1.0)));
  }
  double order = 1e9;
  for (std::size_t i = 0; i + 1 < errors.size(); ++i) order = std::min(order, std::log2(errors[i] / errors[i + 1]));
  v.require(order >= 1.9, "order " + fmt(order));
  const double secs = seconds_since(t0);
  v.require(secs < 10.0, "runtime");
  v.detail << "exact to " << worst_exact << ", min observed order " << fmt(order, 3) << ", " << fmt(secs, 2) << " s";
}

// ---- 3. equations ---------------------------------------------------------------------

double fd_relative_error(const torch::Tensor& analytic, torch::Tensor var, const std::function<double()>& f) {
  auto flat = var.view(-1);
  torch::Tensor fd = torch::zeros_like(var);
  const double h = 1e-6;
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    const double keep = flat[i].item<double>();
    flat[i] = keep + h;
    const double up = f();
    flat[i] = keep - h;
    const double down = f();
    flat[i] = keep;
    fd.view(-1)[i] = (up - down) / (2 * h);
  }
  return (analytic - fd).abs().max().item<double>() / std::max(fd.abs().max().item<double>(), 1e-300);
}

void criterion_equations(Verdict& v) {
  const auto t0 = Clock::now();
  torch::manual_seed(3);
  const auto opts = torch::kDouble;
  // loss terms
  {
    const auto z = torch::zeros({2, 2, 6, 6}, opts);
    const auto m = torch::zeros({2, 2, 3, 3}, opts);
    const CvaeLoss zero = cvae_loss(z, z, m, m, {});
    v.require(zero.total.item<double>() == 0.0, "all-zero loss");
    const CvaeLoss kl = cvae_loss(z, z, torch::ones({2, 2, 3, 3}, opts), m, {1.0, 1.0});
    v.require(std::abs(kl.kl.item<double>() - 0.5) <= 1e-12, "unit-mean KL");
    const auto x = torch::randn({2, 2, 6, 6}, opts);
    const CvaeLoss off = cvae_loss(x + 0.1, x, m, m, {});
    v.require(std::abs(off.recon.item<double>() - 0.1) <= 1e-12 && off.grad.item<double>() <= 1e-12,
              "constant offset");
  }
  // interpolation, flow loss, guidance
  {
    const auto x0 = torch::randn({3, 2, 5, 5}, opts);
    const auto eps = torch::randn({3, 2, 5, 5}, opts);
    v.require(torch::equal(interpolate(x0, eps, 0.0), eps) && torch::equal(interpolate(x0, eps, 1.0), x0),
              "interpolation endpoints");
    v.require(fm_loss(x0 - eps, x0, eps).item<double>() == 0.0, "flow loss zero at target");
    const auto u = torch::randn({3, 2, 5, 5}, opts), c = torch::randn({3, 2, 5, 5}, opts);
    v.require(torch::equal(cfg_combine(u, c, 1.0), c), "guidance w = 1");
  }
  // gradients
  double worst = 0.0;
  {
    const CvaeLossWeights w{0.8, 0.05};
    const auto x = torch::randn({2, 2, 6, 6}, opts);
    auto r = torch::randn({2, 2, 6, 6}, opts);
    auto mu = torch::randn({2, 2, 3, 3}, opts);
    auto lv = 0.5 * torch::randn({2, 2, 3, 3}, opts);
    const CvaeLossGradients g = cvae_loss_gradients(r, x, mu, lv, w);
    const auto total = [&] { return cvae_loss(r, x, mu, lv, w).total.item<double>(); };
    worst = std::max({worst, fd_relative_error(g.recon, r, total), fd_relative_error(g.mu, mu, total),
                      fd_relative_error(g.logvar, lv, total)});
    const auto x0 = torch::randn({2, 2, 4, 4}, opts);
    const auto eps = torch::randn({2, 2, 4, 4}, opts);
    auto vp = torch::randn({2, 2, 4, 4}, opts);
    worst = std::max(worst, fd_relative_error(fm_loss_gradient(vp, x0, eps), vp,
                                              [&] { return fm_loss(vp, x0, eps).item<double>(); }));
  }
  v.require(worst <= 1e-4, "finite differences " + std::to_string(worst));
  const double secs = seconds_since(t0);
  v.require(secs < 30.0, "runtime");
  v.detail << "examples hold, worst gradient relative error " << worst << ", " << fmt(secs, 2) << " s";
}

// ---- 4. dataset audit --------------------------------------------------------------------

void criterion_dataset(Verdict& v, const RunLayout& L, double prepare_seconds) {
  const auto t0 = Clock::now();
  const json manifest = read_json_file(L.dataset() / "manifest.json");
  std::map<std::string, std::string> manifest_split;
  for (const auto& e : manifest.at("volumes")) manifest_split[e.at("id")] = e.at("split");

  std::map<std::string, std::vector<std::pair<const RecordSet*, std::size_t>>> by_volume;
  std::map<std::string, std::set<std::string>> seen_in;
  std::map<std::string, RecordSet> sets;
  for (const char* s : {"train", "val", "test"}) sets[s] = read_records(L.patches(s));
  for (const auto& [split, set] : sets) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      by_volume[set.meta[i].volume_id].push_back({&set, i});
      seen_in[set.meta[i].volume_id].insert(split);
    }
  }

  long leaks = 0, bad_split = 0, bad_count = 0, bad_mask = 0, bad_overlap = 0, bad_normal = 0, bad_data = 0, patches = 0;
  for (const auto& [id, where] : seen_in) {
    leaks += where.size() != 1;
    bad_split += !manifest_split.count(id) || manifest_split.at(id) != *where.begin();
  }
  constexpr double window = static_cast<double>(kPatchSize * kPatchSize);
  for (const auto& [id, split] : manifest_split) {
    const auto& recs = by_volume[id];
    bad_count += recs.size() < 10 || recs.size() > 40;
    const StoredVolume stored = read_volume(L.dataset() / "volumes" / (id + ".ksp"));
    const PreparedVolume pv = prepare_volume(stored.kspace, stored.volume_class, stored.boxes, 0);
    for (const auto& [set, i] : recs) {
      ++patches;
      const RecordMeta& m = set->meta[i];
      const auto s = static_cast<std::size_t>(m.slice_index);
      const Mask& mask = pv.masks.at(s);
      long inside = 0;
      for (int r = m.row; r < m.row + kPatchSize; ++r) {
        for (int c = m.col; c < m.col + kPatchSize; ++c) inside += mask(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) != 0;
      }
      bad_mask += static_cast<double>(inside) / window < 0.80;
      double best = 0.0;
      for (const BoundingBox& b : stored.boxes) {
        if (b.slice != m.slice_index) continue;
        const int h = std::max(0, std::min(b.row1, m.row + kPatchSize) - std::max(b.row0, m.row));
        const int w = std::max(0, std::min(b.col1, m.col + kPatchSize) - std::max(b.col0, m.col));
        best = std::max(best, static_cast<double>(h * w) / static_cast<double>(b.area()));
      }
      if (m.condition.abnormality == Abnormality::Abnormal) bad_overlap += best < 0.25;
      if (m.condition.abnormality == Abnormality::Normal && stored.volume_class != VolumeClass::Unlabeled) {
        bad_normal += best > 0.0;
      }
      const std::span<const float> data = set->record(i);
      const ComplexField& slice = pv.slices.at(s);
      double diff = 0.0;
      for (int r = 0; r < kPatchSize; ++r) {
        for (int c = 0; c < kPatchSize; ++c) {
          const Complex z = slice(static_cast<std::size_t>(m.row + r), static_cast<std::size_t>(m.col + c));
          const std::size_t k = static_cast<std::size_t>(r * kPatchSize + c);
          diff = std::max({diff, std::abs(z.real() - data[k]), std::abs(z.imag() - data[k + kPatchSize * kPatchSize])});
        }
      }
      bad_data += diff > 1e-5;
    }
  }
  for (const auto& [id, recs] : by_volume) bad_split += !manifest_split.count(id);

  // grid patches: exactly the four centre origins on every external slice
  long bad_grid = 0, grid_slices = 0;
  if (fs::exists(L.external() / "index.json")) {
    const RecordSet ext = read_records(L.external());
    std::map<std::pair<std::string, int>, std::set<std::pair<int, int>>> origins;
    std::map<std::pair<std::string, int>, int> per_slice;
    for (const auto& m : ext.meta) {
      origins[{m.volume_id, m.slice_index}].insert({m.row, m.col});
      ++per_slice[{m.volume_id, m.slice_index}];
    }
    const std::set<std::pair<int, int>> want = {{75, 75}, {75, 150}, {150, 75}, {150, 150}};
    for (const auto& [key, o] : origins) {
      ++grid_slices;
      bad_grid += o != want || per_slice[key] != 4;
    }
  }
  {
    Rng rng = make_rng(4, "acceptance/grid");
    const ComplexField slice = random_field(rng, 320);
    const auto grid = extract_grid_patches(slice, {Sequence::AXT1, Abnormality::Normal}, "g", 0, VolumeClass::Normal);
    std::set<std::pair<int, int>> o;
    for (const auto& p : grid) {
      o.insert({p.row, p.col});
      bad_grid += std::abs(static_cast<double>(p.data[0]) - slice(static_cast<std::size_t>(p.row), static_cast<std::size_t>(p.col)).real()) > 1e-6;
    }
    bad_grid += grid.size() != 4 || o != std::set<std::pair<int, int>>{{75, 75}, {75, 150}, {150, 75}, {150, 150}};
  }

  v.require(leaks == 0 && bad_split == 0, "split leakage " + std::to_string(leaks) + ", manifest mismatches " + std::to_string(bad_split));
  v.require(bad_count == 0, std::to_string(bad_count) + " volumes outside [10, 40] patches");
  v.require(bad_mask == 0, std::to_string(bad_mask) + " patches under 80% mask coverage");
  v.require(bad_overlap == 0, std::to_string(bad_overlap) + " abnormal patches under 25% box overlap");
  v.require(bad_normal == 0, std::to_string(bad_normal) + " normal patches touching a box");
  v.require(bad_data == 0, std::to_string(bad_data) + " patches differing from their source slice");
  v.require(bad_grid == 0, std::to_string(bad_grid) + " grid slices with wrong origins");
  v.require(manifest_split.size() >= 150, "dataset smaller than the default");
  const double secs = seconds_since(t0);
  v.require(secs < 300.0, "audit runtime");
  v.detail << manifest_split.size() << " volumes, " << patches << " patches, " << grid_slices
           << " grid slices audited in " << fmt(secs, 1) << " s (prepare took " << fmt(prepare_seconds, 1) << " s)";
}

// ---- 5 to 8. desk run results ----------------------------------------------------------------

double stage_seconds(const fs::path& dir) { return read_json_file(dir / "timing.json").at("seconds").get<double>(); }

void criterion_cvae(Verdict& v, const RunLayout& L) {
  const json q = read_json_file(L.cvae() / "quality.json");
  const double g = q.at("coherence"), s = q.at("ssim"), secs = stage_seconds(L.cvae());
  v.require(g >= 0.95, "coherence");
  v.require(s >= 0.85, "SSIM");
  v.require(secs <= 1800.0, "training time");
  v.detail << "test coherence " << fmt(g) << ", SSIM " << fmt(s) << ", PSNR " << fmt(q.at("psnr").get<double>(), 2)
           << " dB, trained in " << fmt(secs / 60.0, 1) << " min";
}

void criterion_fidelity(Verdict& v, const RunLayout& L, const ExperimentConfig& cfg) {
  const json r = read_json_file(L.eval_latent() / "results.json");
  v.require(r.contains("control") && r.contains("noise"), "control and noise runs present");
  if (!v.pass) return;
  const double control = r.at("control").at("mean"), noise = r.at("noise").at("mean");
  v.require(control >= 0.45 && control <= 0.55, "control AUROC " + fmt(control));
  v.require(noise >= 0.99, "noise AUROC " + fmt(noise));
  v.detail << "control " << fmt(control) << " +- " << fmt(r.at("control").at("std").get<double>()) << ", noise "
           << fmt(noise) << "; stage-1 real vs synthetic:";
  for (const auto& s : r.at("per_sequence")) {
    const auto& a = s.at("auroc");
    const bool shape_ok = a.size() == cfg.eval_latent.classifier.seeds.size() &&
                          !a.empty() && a[0].size() == static_cast<std::size_t>(cfg.eval_latent.test_sets);
    v.require(shape_ok, "seed x test-set grid for " + s.at("sequence").get<std::string>());
    v.detail << " " << s.at("sequence").get<std::string>() << " " << fmt(s.at("mean").get<double>(), 3) << "+-"
             << fmt(s.at("std").get<double>(), 3);
  }
  v.detail << " (" << cfg.eval_latent.classifier.seeds.size() << " seeds x " << cfg.eval_latent.test_sets << " sets)";
  v.require(r.at("per_sequence").size() == kAllSequences.size(), "every sequence reported");
}

void criterion_downstream(Verdict& v, const RunLayout& L, double pipeline_seconds) {
  const auto rows = parse_results_tsv(read_file(L.report() / "results.tsv"));
  std::vector<double> base;
  for (const auto& r : rows) {
    if (r.experiment == "baseline" && r.split == "test") base.push_back(r.auroc);
  }
  const auto sub = curves(rows, "substitution", "test");
  const auto add = curves(rows, "additive", "test");
  v.require(!base.empty(), "baseline rows");
  v.require(sub.count("real_synthetic") && sub.at("real_synthetic").size() == 11, "11-point substitution curve");
  v.require(add.count("real_synthetic") && add.at("real_synthetic").size() == 11, "11-point additive curve");
  if (!v.pass) return;
  const double b = mean_std(base).mean;
  const CurvePoint zero = sub.at("real_synthetic").front();
  v.require(zero.fraction == 0.0, "0% point present");
  v.require(std::abs(zero.mean - b) <= 0.10, "0% real within 0.10 of baseline");
  v.require(zero.count >= 2, "at least two seeds");
  for (const char* f : {"substitution.svg", "additive.svg"}) {
    const std::string svg = read_file(L.report() / f);
    v.require(svg.find("<polyline") != std::string::npos && svg.find("stroke-dasharray") != std::string::npos &&
                  svg.find("<polygon") != std::string::npos,
              std::string(f) + " has curve, band and dashed baseline");
  }
  v.require(pipeline_seconds <= 8 * 3600.0, "runtime");
  v.detail << "baseline " << fmt(b) << ", 0% real " << fmt(zero.mean) << " +- " << fmt(zero.std) << " (" << zero.count
           << " seeds), 100% additive " << fmt(add.at("real_synthetic").back().mean) << ", pipeline "
           << fmt(pipeline_seconds / 3600.0, 2) << " h";
}

void criterion_protocol(Verdict& v, const RunLayout& L, const ExperimentConfig& cfg) {
  const json a1 = read_json_file(L.stage1() / "audit.json");
  const double draws = a1.at("condition_draws"), dropped = a1.at("dropped_conditions");
  const double rate = dropped / draws;
  v.require(draws >= 1e4, "at least 1e4 condition draws");
  v.require(rate >= 0.08 && rate <= 0.12, "dropout rate " + fmt(rate));

  const json a2 = read_json_file(L.stage2() / "audit.json");
  const double abnormal = a2.at("abnormal_fraction");
  v.require(abnormal >= 0.47 && abnormal <= 0.53, "abnormal fraction " + fmt(abnormal));

  // phase A on the desk stage-1 model: pretrained weights must not move at all
  bool frozen = true;
  {
    FlowModel s1 = FlowModel::load(L.stage1_checkpoint());
    RecordSet lat = read_records(L.latents("train"));
    FlowConfig fc = cfg.flow;
    fc.stage2_phase_a_steps = 5;
    fc.stage2_phase_b_steps = 0;
    fc.batch_size = 8;
    std::map<std::string, torch::Tensor> before;
    for (const auto& p : s1.ema->named_parameters()) before[p.key()] = p.value().detach().clone();
    Stage2Result r = train_stage2(lat, s1, fc, cfg.seed);
    for (const auto* net : {&r.model.online, &r.model.ema}) {
      for (const auto& p : (*net)->named_parameters()) {
        if (!is_new_stage2_parameter(p.key())) frozen = frozen && torch::equal(p.value(), before.at(p.key()));
      }
    }
  }
  v.require(frozen, "phase-A freeze");

  bool agg = true;
  {
    std::vector<double> p40(40, 0.2);
    p40[3] = 0.9;
    p40[17] = 0.6;
    agg = agg && aggregate_volume(p40) == (0.9 + 0.6) / 2.0;
    std::vector<double> p10 = {0.1, 0.3, 0.2, 0.7, 0.05, 0.4, 0.0, 0.6, 0.5, 0.25};
    agg = agg && aggregate_volume(p10) == 0.7;
    std::vector<double> p100(100);
    for (int i = 0; i < 100; ++i) p100[static_cast<std::size_t>(i)] = i / 100.0;
    agg = agg && aggregate_volume(p100) == (0.99 + 0.98 + 0.97 + 0.96 + 0.95) / 5.0;
    std::vector<double> p21(21, 0.5);
    p21[0] = 1.0;
    agg = agg && aggregate_volume(p21) == (1.0 + 0.5) / 2.0;
  }
  v.require(agg, "aggregation examples");
  v.detail << "dropout " << fmt(rate) << " over " << static_cast<long>(draws) << " draws, abnormal fraction "
           << fmt(abnormal) << " over " << a2.at("labeled_draws").get<long>() << " draws, phase-A freeze bit-identical, "
           << "aggregation examples exact";
}

// ---- 9. reproducibility --------------------------------------------------------------------

void criterion_repro(Verdict& v, const fs::path& tiny_config, const fs::path& work) {
  const auto t0 = Clock::now();
  ExperimentConfig c = load_config(tiny_config);
  RunOptions force;
  force.force = true;
  c.out = (work / "repro_a").string();
  run_pipeline(c, force);
  c.out = (work / "repro_b").string();
  run_pipeline(c, force);
  std::string why;
  const bool same = runs_match(RunLayout{work / "repro_a"}, RunLayout{work / "repro_b"}, 1e-5, why);
  v.require(same, why);
  v.detail << "two runs of the tiny config: checksums identical, metrics within 1e-5, " << fmt(seconds_since(t0), 1) << " s";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  fs::path desk = fs::path(CMRI_TEST_CONFIG_DIR) / "desk.json";
  fs::path tiny = fs::path(CMRI_TEST_CONFIG_DIR) / "tiny.json";
  fs::path work = "acceptance_run";
  bool reuse = false;
  std::vector<int> only;
  app.add_option("--desk-config", desk)->check(CLI::ExistingFile);
  app.add_option("--tiny-config", tiny)->check(CLI::ExistingFile);
  app.add_option("--work", work);
  app.add_flag("--reuse", reuse, "keep finished stages of an earlier run in --work");
  app.add_option("--only", only, "criteria to run");
  CLI11_PARSE(app, argc, argv);

  torch::set_num_threads(1);
  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };
  fs::create_directories(work);
  std::map<int, Verdict> verdicts;
  auto run = [&](int k, const std::function<void(Verdict&)>& f) {
    if (!wanted(k)) return;
    Verdict& v = verdicts[k];
    try {
      f(v);
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << " [error: " << e.what() << "]";
    }
    std::cout << "criterion " << k << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail.str() << std::endl;
  };

  run(1, criterion_metrics);
  run(2, criterion_sampler);
  run(3, criterion_equations);

  const bool desk_needed = wanted(4) || wanted(5) || wanted(6) || wanted(7) || wanted(8);
  if (desk_needed) {
    ExperimentConfig cfg = load_config(desk);
    cfg.out = (work / "desk").string();
    cfg.validate();
    const RunLayout L{cfg.out};
    RunOptions opt;
    opt.force = true;
    opt.log = [](const std::string& m) { std::cerr << m << std::endl; };
    struct Stage {
      fs::path dir;
      void (*cmd)(const ExperimentConfig&, const RunOptions&);
    };
    const std::vector<Stage> stages = {{L.dataset(), cmd_prepare},          {L.cvae(), cmd_train_ae},
                                       {L.latents("train").parent_path(), cmd_encode},
                                       {L.stage1(), cmd_train_fm},          {L.stage2(), cmd_finetune_fm},
                                       {L.samples(), cmd_sample},           {L.decoded(), cmd_decode},
                                       {L.eval_latent(), cmd_eval_latent},  {L.eval_downstream(), cmd_eval_downstream},
                                       {L.report(), cmd_report}};
    double pipeline_seconds = 0.0;
    std::string failure;
    bool stale = !reuse;
    for (const Stage& s : stages) {
      const bool done = fs::exists(s.dir / "timing.json");
      if (stale || !done) {
        stale = true;
        std::cerr << "running stage " << s.dir.filename().string() << std::endl;
        try {
          s.cmd(cfg, opt);
        } catch (const std::exception& e) {
          failure = s.dir.filename().string() + ": " + e.what();
          break;
        }
      }
      pipeline_seconds += stage_seconds(s.dir);
    }
    const double prepare_seconds = fs::exists(L.dataset() / "timing.json") ? stage_seconds(L.dataset()) : 0.0;
    auto guarded = [&](int k, const std::function<void(Verdict&)>& f) {
      run(k, [&](Verdict& v) {
        if (!failure.empty()) throw std::runtime_error("desk pipeline failed at " + failure);
        f(v);
      });
    };
    guarded(4, [&](Verdict& v) { criterion_dataset(v, L, prepare_seconds); });
    guarded(5, [&](Verdict& v) { criterion_cvae(v, L); });
    guarded(6, [&](Verdict& v) { criterion_fidelity(v, L, cfg); });
    guarded(7, [&](Verdict& v) { criterion_downstream(v, L, pipeline_seconds); });
    guarded(8, [&](Verdict& v) { criterion_protocol(v, L, cfg); });
  }
  run(9, [&](Verdict& v) { criterion_repro(v, tiny, work); });

  bool all = true;
  for (const auto& [k, v] : verdicts) all = all && v.pass;
  return all ? 0 : 1;
}

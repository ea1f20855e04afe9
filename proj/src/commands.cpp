#include "cmri/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <iomanip>
#include <set>
#include <sstream>

#include "cmri/error.hpp"
#include "cmri/evalharness.hpp"
#include "cmri/flowmatch.hpp"
#include "cmri/metrics.hpp"
#include "cmri/patching.hpp"
#include "cmri/phantom.hpp"
#include "cmri/report.hpp"
#include "cmri/rng.hpp"
#include "cmri/tensor_io.hpp"

namespace cmri {

namespace {

constexpr std::array<Split, 3> kSplits = {Split::Train, Split::Validation, Split::Test};

void say(const RunOptions& o, const std::string& s) {
  if (o.log) o.log(s);
}

void prepare_output(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw ValidationError("output exists: " + dir.string() + " (use --force to replace it)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void require_artifact(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifactError(p.string());
}

void require_records(const fs::path& dir) { require_artifact(dir / "index.json"); }

void write_json(const fs::path& p, const json& j) { write_text_atomic(p, j.dump(2) + "\n"); }

json read_json(const fs::path& p) {
  require_artifact(p);
  try {
    return json::parse(read_text(p));
  } catch (const json::parse_error& e) {
    throw ValidationError(p.string() + ": " + e.what());
  }
}

void freeze_config(const fs::path& dir, const ExperimentConfig& cfg) { write_json(dir / "config.json", to_json(cfg)); }

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_timing(const fs::path& dir, const Stopwatch& w) { write_json(dir / "timing.json", {{"seconds", w.seconds()}}); }

RecordMeta meta_of(const PatchRecord& p) {
  RecordMeta m;
  m.volume_id = p.volume_id;
  m.condition = p.condition;
  m.volume_class = p.volume_class;
  m.slice_index = p.slice_index;
  m.row = p.row;
  m.col = p.col;
  m.overlap_fraction = p.overlap_fraction;
  return m;
}

std::map<std::string, std::string> checksums(const fs::path& root, std::initializer_list<const char*> subdirs) {
  std::map<std::string, std::string> out;
  for (const char* sub : subdirs) {
    if (!fs::exists(root / sub)) continue;
    for (const auto& e : fs::recursive_directory_iterator(root / sub)) {
      if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = sha256_file(e.path());
    }
  }
  return out;
}

RecordSet filter(const RecordSet& s, const std::function<bool(const RecordMeta&)>& keep) {
  RecordSet out;
  out.shape = s.shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (keep(s.meta[i])) out.append(s.record(i), s.meta[i]);
  }
  return out;
}

bool labeled(const RecordMeta& m) {
  return m.condition.abnormality == Abnormality::Normal || m.condition.abnormality == Abnormality::Abnormal;
}

torch::Tensor sample_latents(FlowModel& model, ConditionLabel cond, std::int64_t n, double w, int n_steps, int batch,
                             at::Generator& gen) {
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < n; i += batch) {
    const auto k = std::min<std::int64_t>(batch, n - i);
    parts.push_back(heun_sample(model, std::vector<ConditionLabel>(static_cast<std::size_t>(k), cond), w, n_steps, gen));
  }
  if (parts.empty()) return torch::empty({0, kLatentChannels, kLatentSize, kLatentSize});
  return torch::cat(parts, 0);
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

ExperimentConfig resolve_config(const std::optional<fs::path>& config_path, std::optional<std::uint64_t> seed,
                                const std::optional<std::string>& out, std::optional<int> workers) {
  ExperimentConfig cfg = config_path ? load_config(*config_path) : ExperimentConfig{};
  if (seed) cfg.seed = *seed;
  if (out) cfg.out = *out;
  if (workers) cfg.workers = *workers;
  cfg.validate();
  return cfg;
}

// ---- prepare -------------------------------------------------------------------------------

void cmd_prepare(const ExperimentConfig& cfg, const RunOptions& opt) {
  const Stopwatch clock;
  const RunLayout L{cfg.out};
  prepare_output(L.dataset(), opt.force);
  const PhantomSpec spec = cfg.phantom_spec();
  const PatchingOptions popt = cfg.patching_options();

  struct Job {
    Sequence sequence;
    VolumeClass volume_class;
    int index;
    std::string id;
  };
  struct Output {
    std::vector<PatchRecord> patches;
    std::vector<std::string> warnings;
  };
  std::vector<Job> jobs;
  for (const VolumeGroup& g : dataset_groups()) {
    for (int i = 0; i < spec.volumes_per_group; ++i) {
      jobs.push_back({g.sequence, g.volume_class, i, make_volume_id(spec, g.sequence, g.volume_class, i)});
    }
  }
  fs::create_directories(L.dataset() / "volumes");
  auto process = [&](const Job& j) {
    PhantomVolume v = generate_volume(spec, j.sequence, j.volume_class, j.index);
    write_volume(L.dataset() / "volumes" / (j.id + ".ksp"), {v.kspace, v.volume_class, v.boxes});
    const PreparedVolume pv = prepare_volume(v.kspace, j.volume_class, v.boxes, 0);
    Rng rng = make_rng(cfg.seed, "patching/" + j.id);
    ExtractionResult r = j.volume_class == VolumeClass::Unlabeled
                             ? extract_random_patches(pv, rng, popt.random_patches_per_volume, popt)
                             : extract_labeled_patches(pv, rng, popt);
    return Output{std::move(r.patches), std::move(r.warnings)};
  };
  std::vector<Output> outputs(jobs.size());
  const auto workers = static_cast<std::size_t>(cfg.workers);
  for (std::size_t i = 0; i < jobs.size(); i += workers) {
    std::vector<std::future<Output>> running;
    for (std::size_t k = i; k < std::min(jobs.size(), i + workers); ++k) {
      running.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, process, std::cref(jobs[k])));
    }
    for (std::size_t k = 0; k < running.size(); ++k) outputs[i + k] = running[k].get();
    if ((i / workers) % 20 == 0) say(opt, "prepared " + std::to_string(std::min(jobs.size(), i + workers)) + "/" + std::to_string(jobs.size()) + " volumes");
  }

  std::vector<VolumeLabel> labels;
  for (const Job& j : jobs) labels.push_back({j.id, j.sequence, j.volume_class});
  const SplitManifest split = split_volumes(labels, cfg.seed);

  std::map<Split, RecordSet> sets;
  for (const Split s : kSplits) sets[s].shape = {2, kPatchSize, kPatchSize};
  json volumes = json::array();
  json warnings = json::array();
  // counts[sequence][class][split] = {volumes, patches, normal, abnormal}
  std::map<std::tuple<Sequence, VolumeClass, Split>, std::array<long, 4>> counts;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const Split s = split.of(jobs[i].id);
    auto& c = counts[{jobs[i].sequence, jobs[i].volume_class, s}];
    ++c[0];
    for (const PatchRecord& p : outputs[i].patches) {
      sets[s].append(p.data, meta_of(p));
      ++c[1];
      c[2] += p.condition.abnormality == Abnormality::Normal;
      c[3] += p.condition.abnormality == Abnormality::Abnormal;
    }
    for (const auto& w : outputs[i].warnings) {
      warnings.push_back(jobs[i].id + ": " + w);
      say(opt, "warning: " + jobs[i].id + ": " + w);
    }
    volumes.push_back({{"id", jobs[i].id},
                       {"sequence", std::string(to_string(jobs[i].sequence))},
                       {"class", std::string(to_string(jobs[i].volume_class))},
                       {"split", std::string(to_string(s))},
                       {"patches", outputs[i].patches.size()}});
  }
  outputs.clear();
  for (const Split s : kSplits) write_records(L.patches(to_string(s)), sets[s]);

  std::size_t external_patches = 0;
  if (cfg.external.volumes_per_group > 0) {
    PhantomSpec ext = spec;
    ext.seed = substream_seed(cfg.seed, "external");
    ext.rows = static_cast<std::size_t>(cfg.external.rows);
    ext.cols = static_cast<std::size_t>(cfg.external.cols);
    ext.volumes_per_group = cfg.external.volumes_per_group;
    ext.id_prefix = "ext";
    RecordSet grid;
    grid.shape = {2, kPatchSize, kPatchSize};
    for (const VolumeGroup& g : dataset_groups()) {
      if (g.volume_class == VolumeClass::Unlabeled) continue;
      for (int i = 0; i < ext.volumes_per_group; ++i) {
        const std::string id = make_volume_id(ext, g.sequence, g.volume_class, i);
        const PhantomVolume v = generate_volume(ext, g.sequence, g.volume_class, i);
        const PreparedVolume pv =
            prepare_volume(v.kspace, g.volume_class, v.boxes, static_cast<std::size_t>(cfg.patching.resize_to));
        for (std::size_t s = 0; s < pv.slices.size(); ++s) {
          for (const PatchRecord& p : extract_grid_patches(pv.slices[s], {g.sequence, default_abnormality(g.volume_class)},
                                                           id, static_cast<int>(s), g.volume_class)) {
            grid.append(p.data, meta_of(p));
          }
        }
      }
    }
    external_patches = grid.size();
    write_records(L.external(), grid);
  }

  std::ostringstream table;
  table << "sequence\tclass\tsplit\tvolumes\tpatches\tnormal_patches\tabnormal_patches\n";
  json count_rows = json::array();
  for (const auto& [key, c] : counts) {
    const auto& [seq, cls, s] = key;
    table << to_string(seq) << '\t' << to_string(cls) << '\t' << to_string(s) << '\t' << c[0] << '\t' << c[1] << '\t'
          << c[2] << '\t' << c[3] << '\n';
    count_rows.push_back({{"sequence", std::string(to_string(seq))}, {"class", std::string(to_string(cls))},
                          {"split", std::string(to_string(s))}, {"volumes", c[0]}, {"patches", c[1]},
                          {"normal_patches", c[2]}, {"abnormal_patches", c[3]}});
  }
  write_text_atomic(L.dataset() / "counts.tsv", table.str());
  say(opt, "patch counts per sequence, class and split:\n" + table.str());

  json manifest;
  manifest["seed"] = cfg.seed;
  manifest["ratios"] = {{"labeled", {kLabeledRatios.train, kLabeledRatios.validation, kLabeledRatios.test}},
                        {"unlabeled", {kUnlabeledRatios.train, kUnlabeledRatios.validation, kUnlabeledRatios.test}}};
  manifest["volumes"] = volumes;
  manifest["counts"] = count_rows;
  manifest["external_patches"] = external_patches;
  manifest["warnings"] = warnings;
  manifest["checksums"] = checksums(L.dataset(), {"volumes", "patches", "external"});
  write_json(L.dataset() / "manifest.json", manifest);
  freeze_config(L.dataset(), cfg);
  write_timing(L.dataset(), clock);
}

// ---- autoencoder ---------------------------------------------------------------------------

void cmd_train_ae(const ExperimentConfig& cfg, const RunOptions& opt) {
  const Stopwatch clock;
  const RunLayout L{cfg.out};
  for (const Split s : kSplits) require_records(L.patches(to_string(s)));
  prepare_output(L.cvae(), opt.force);
  const RecordSet train = read_records(L.patches("train"));
  const RecordSet val = read_records(L.patches("val"));
  CvaeModel model = train_cvae(train, val, cfg.cvae, cfg.seed, opt.log);
  model.save(L.cvae_checkpoint());
  const ReconstructionQuality q = reconstruction_quality(model, read_records(L.patches("test")));
  say(opt, "test reconstruction: coherence " + fixed(q.coherence) + " SSIM " + fixed(q.ssim) + " PSNR " + fixed(q.psnr, 2));
  json log = json::array();
  for (const auto& r : model.log) {
    log.push_back({{"epoch", r.epoch}, {"step", r.step}, {"train_total", r.train_total},
                   {"train_recon", r.train_recon}, {"val_total", r.val_total}});
  }
  write_json(L.cvae() / "log.json", log);
  write_json(L.cvae() / "quality.json",
             {{"split", "test"}, {"coherence", q.coherence}, {"ssim", q.ssim}, {"psnr", q.psnr}, {"count", q.count},
              {"best_epoch", model.best_epoch}});
  freeze_config(L.cvae(), cfg);
  write_timing(L.cvae(), clock);
}

void cmd_encode(const ExperimentConfig& cfg, const RunOptions& opt) {
  const Stopwatch clock;
  const RunLayout L{cfg.out};
  require_artifact(L.cvae_checkpoint());
  for (const Split s : kSplits) require_records(L.patches(to_string(s)));
  prepare_output(L.root / "latents", opt.force);
  CvaeModel model = CvaeModel::load(L.cvae_checkpoint());
  for (const Split s : kSplits) {
    const RecordSet latents = encode_records(model, read_records(L.patches(to_string(s))));
    write_records(L.latents(to_string(s)), latents);
    say(opt, "encoded " + std::to_string(latents.size()) + " " + std::string(to_string(s)) + " patches");
  }
  freeze_config(L.root / "latents", cfg);
  write_timing(L.root / "latents", clock);
}

// ---- flow matching -------------------------------------------------------------------------

namespace {

// Each record index goes to half 0 or 1 by alternating volumes within its sequence.
std::array<std::vector<std::size_t>, 2> alternate_halves(const RecordSet& s, std::span<const std::size_t> subset) {
  std::map<Sequence, std::set<std::string>> volumes;
  for (const std::size_t i : subset) volumes[s.meta[i].condition.sequence].insert(s.meta[i].volume_id);
  std::map<std::string, int> half;
  for (const auto& [seq, ids] : volumes) {
    int k = 0;
    for (const auto& id : ids) half[id] = k++ % 2;
  }
  std::array<std::vector<std::size_t>, 2> out;
  for (const std::size_t i : subset) out[static_cast<std::size_t>(half[s.meta[i].volume_id])].push_back(i);
  return out;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

// Real-vs-synthetic AUROC of a stage-1 candidate on the validation latents.
double candidate_fidelity(FlowModel& model, const RecordSet& val, const ExperimentConfig& cfg, int candidate) {
  const auto halves = alternate_halves(val, iota_indices(val.size()));
  if (halves[0].empty() || halves[1].empty()) throw ValidationError("selection needs validation latents from two volumes");
  at::Generator gen = make_generator(cfg.seed, "stage1/select/" + std::to_string(candidate));
  std::array<torch::Tensor, 2> real, synth;
  for (std::size_t h = 0; h < 2; ++h) {
    real[h] = model.stats.standardize(stack_records(val, halves[h]));
    std::vector<torch::Tensor> parts;
    std::map<Sequence, std::int64_t> per_seq;
    for (const std::size_t i : halves[h]) ++per_seq[val.meta[i].condition.sequence];
    for (const auto& [seq, n] : per_seq) {
      parts.push_back(sample_latents(model, {seq, Abnormality::Null}, n, cfg.sampler.w_stage1, cfg.sampler.n_steps,
                                     cfg.sampler.batch_size, gen));
    }
    synth[h] = model.stats.standardize(torch::cat(parts, 0));
  }
  ClassifierTrainConfig c = cfg.eval_latent.classifier;
  c.seeds = {c.seeds.front()};
  return train_discriminator(real[0], synth[0], real[1], {synth[1]}, c, ClassifierInput::Latent).mean;
}

}  // namespace

void cmd_train_fm(const ExperimentConfig& cfg, const RunOptions& opt) {
  const Stopwatch clock;
  const RunLayout L{cfg.out};
  require_artifact(L.cvae_checkpoint());
  require_records(L.latents("train"));
  prepare_output(L.stage1(), opt.force);
  const CvaeModel cvae = CvaeModel::load(L.cvae_checkpoint());
  const RecordSet train = read_records(L.latents("train"));
  Stage1Result res = train_stage1(train, cvae.stats, cfg.flow, cfg.seed, opt.log);
  res.model.sampler = cfg.sampler;
  json audit = {{"condition_draws", res.condition_draws},
                {"dropped_conditions", res.dropped_conditions},
                {"dropout_rate", static_cast<double>(res.dropped_conditions) / std::max(1L, res.condition_draws)}};

  FlowModel* chosen = &res.model;
  if (res.snapshots.size() > 1) {
    require_records(L.latents("val"));
    const RecordSet val = read_records(L.latents("val"));
    std::vector<double> metrics;
    for (std::size_t k = 0; k < res.snapshots.size(); ++k) {
      res.snapshots[k].sampler = cfg.sampler;
      res.snapshots[k].save(L.stage1() / ("snapshot_" + std::to_string(k) + ".ckpt"));
      metrics.push_back(candidate_fidelity(res.snapshots[k], val, cfg, static_cast<int>(k)));
      say(opt, "snapshot " + std::to_string(k) + " validation real-vs-synthetic AUROC " + fixed(metrics.back()));
    }
    const std::size_t best = select_model(metrics, Criterion::Minimize);
    chosen = &res.snapshots[best];
    audit["selection"] = {{"criterion", "lowest real-vs-synthetic AUROC"}, {"metrics", metrics}, {"selected", best}};
  }
  chosen->save(L.stage1_checkpoint());
  if (fs::exists(L.latents("val") / "index.json")) {
    audit["validation_loss"] = flow_validation_loss(chosen->ema, read_records(L.latents("val")), chosen->stats, false, cfg.seed);
  }
  write_json(L.stage1() / "audit.json", audit);
  freeze_config(L.stage1(), cfg);
  write_timing(L.stage1(), clock);
}

void cmd_finetune_fm(const ExperimentConfig& cfg, const RunOptions& opt) {
  const Stopwatch clock;
  const RunLayout L{cfg.out};
  require_artifact(L.stage1_checkpoint());
  require_records(L.latents("train"));
  prepare_output(L.stage2(), opt.force);
  const FlowModel stage1 = FlowModel::load(L.stage1_checkpoint());
  const RecordSet train = read_records(L.latents("train"));
  Stage2Result res = train_stage2(train, stage1, cfg.flow, cfg.seed, opt.log);
  res.model.sampler = cfg.sampler;
  res.model.save(L.stage2_checkpoint());
  json audit = {{"labeled_draws", res.labeled_draws},
                {"abnormal_draws", res.abnormal_draws},
                {"abnormal_fraction", static_cast<double>(res.abnormal_draws) / std::max(1L, res.labeled_draws)},
                {"condition_draws", res.condition_draws},
                {"dropped_conditions", res.dropped_conditions},
                {"dropout_rate", static_cast<double>(res.dropped_conditions) / std::max(1L, res.condition_draws)}};
  if (fs::exists(L.latents("val") / "index.json")) {
    audit["validation_loss"] = flow_validation_loss(res.model.ema, read_records(L.latents("val")), res.model.stats, true, cfg.seed);
  }
  write_json(L.stage2() / "audit.json", audit);
  freeze_config(L.stage2(), cfg);
  write_timing(L.stage2(), clock);
}

// ---- sampling ------------------------------------------------------------------------------

void cmd_sample(const ExperimentConfig& cfg, const RunOptions& opt) {
  const Stopwatch clock;
  const RunLayout L{cfg.out};
  const SampleConfig& sc = cfg.sample;
  const bool stage1 = sc.stage == "stage1";
  const fs::path ckpt = stage1 ? L.stage1_checkpoint() : L.stage2_checkpoint();
  require_artifact(ckpt);
  ConditionLabel cond{parse_sequence(sc.sequence), stage1 ? Abnormality::Null : parse_abnormality(sc.abnormality)};
  if (cond.sequence == Sequence::Null) throw ValidationError("sample.sequence: a concrete sequence is required");
  if (!stage1 && cond.abnormality == Abnormality::Null) {
    throw ValidationError("sample.abnormality: normal, abnormal or unknown is required for stage 2");
  }
  prepare_output(L.samples(), opt.force);
  FlowModel model = FlowModel::load(ckpt);
  const std::string stream = "sample/" + sc.stage + "/" + std::string(to_string(cond.sequence)) + "/" +
                             std::string(to_string(cond.abnormality));
  at::Generator gen = make_generator(cfg.seed, stream);
  const torch::Tensor z = sample_latents(model, cond, sc.n, sc.w, cfg.sampler.n_steps, cfg.sampler.batch_size, gen);
  const std::string digest = sha256_file(ckpt);
  json index = json::array();
  for (int i = 0; i < sc.n; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "latent_%04d.lat", i);
    Container c;
    c.meta = {{"provenance", "synthetic"},
              {"stage", sc.stage},
              {"sequence", std::string(to_string(cond.sequence))},
              {"abnormality", std::string(to_string(cond.abnormality))},
              {"w", sc.w},
              {"n_steps", cfg.sampler.n_steps},
              {"seed", cfg.seed},
              {"index", i},
              {"checkpoint_sha256", digest}};
    c.arrays.push_back({"latent", {kLatentChannels, kLatentSize, kLatentSize}, to_vector(z[i])});
    write_container(L.samples() / name, kLatentMagic, c);
    json entry = c.meta;
    entry["file"] = name;
    index.push_back(entry);
  }
  write_json(L.samples() / "index.json", index);
  say(opt, "wrote " + std::to_string(sc.n) + " latents to " + L.samples().string());
  freeze_config(L.samples(), cfg);
  write_timing(L.samples(), clock);
}

void cmd_decode(const ExperimentConfig& cfg, const RunOptions& opt) {
  const Stopwatch clock;
  const RunLayout L{cfg.out};
  require_artifact(L.cvae_checkpoint());
  const json index = read_json(L.samples() / "index.json");
  prepare_output(L.decoded(), opt.force);
  CvaeModel cvae = CvaeModel::load(L.cvae_checkpoint());
  json out = json::array();
  for (const json& e : index) {
    const fs::path src = L.samples() / e.at("file").get<std::string>();
    require_artifact(src);
    const Container c = read_container(src, kLatentMagic);
    const NamedArray& a = c.array("latent");
    const torch::Tensor z = torch::from_blob(const_cast<float*>(a.values.data()), {1, kLatentChannels, kLatentSize, kLatentSize},
                                             torch::kFloat).clone();
    const Sequence seq = parse_sequence(c.meta.at("sequence").get<std::string>());
    const torch::Tensor patch = cvae.decode(z, sequence_ids({{seq, Abnormality::Null}}))[0];
    Container p;
    p.meta = c.meta;
    p.meta["source"] = e.at("file");
    p.arrays.push_back({"patch", {2, kPatchSize, kPatchSize}, to_vector(patch)});
    std::string name = e.at("file").get<std::string>();
    name = "patch_" + name.substr(name.find('_') + 1);
    name.replace(name.size() - 4, 4, ".pat");
    write_container(L.decoded() / name, kPatchMagic, p);
    json entry = p.meta;
    entry["file"] = name;
    out.push_back(entry);
  }
  write_json(L.decoded() / "index.json", out);
  say(opt, "decoded " + std::to_string(out.size()) + " latents");
  freeze_config(L.decoded(), cfg);
  write_timing(L.decoded(), clock);
}

// ---- evaluation ----------------------------------------------------------------------------

namespace {

std::vector<std::size_t> capped(const RecordSet& s, std::vector<std::size_t> idx, int cap, std::uint64_t seed,
                                const std::string& stream) {
  if (cap <= 0 || idx.size() <= static_cast<std::size_t>(cap)) return idx;
  Rng rng = make_rng(seed, stream);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(cap));
  std::sort(idx.begin(), idx.end());
  (void)s;
  return idx;
}

json discriminator_json(const DiscriminatorResult& r) {
  return {{"seeds", r.seeds}, {"auroc", r.auroc}, {"mean", r.mean}, {"std", r.std}};
}

void add_rows(std::vector<AurocRow>& rows, const DiscriminatorResult& r, const std::string& experiment,
              const std::string& condition) {
  for (std::size_t s = 0; s < r.seeds.size(); ++s) {
    for (std::size_t k = 0; k < r.auroc[s].size(); ++k) {
      rows.push_back({experiment, std::nan(""), condition, r.seeds[s], "test" + std::to_string(k + 1), r.auroc[s][k]});
    }
  }
}

}  // namespace

void cmd_eval_latent(const ExperimentConfig& cfg, const RunOptions& opt) {
  const Stopwatch clock;
  const RunLayout L{cfg.out};
  require_artifact(L.stage1_checkpoint());
  for (const Split s : kSplits) require_records(L.latents(to_string(s)));
  prepare_output(L.eval_latent(), opt.force);
  FlowModel model = FlowModel::load(L.stage1_checkpoint());
  const RecordSet train = read_records(L.latents("train"));
  const RecordSet val = read_records(L.latents("val"));
  const RecordSet test = read_records(L.latents("test"));
  const EvalLatentConfig& ec = cfg.eval_latent;
  const int n_steps = cfg.sampler.n_steps;
  const int batch = cfg.sampler.batch_size;
  const double w = cfg.sampler.w_stage1;

  std::map<Sequence, std::vector<std::size_t>> train_by_seq, test_by_seq;
  for (std::size_t i = 0; i < train.size(); ++i) train_by_seq[train.meta[i].condition.sequence].push_back(i);
  for (std::size_t i = 0; i < test.size(); ++i) test_by_seq[test.meta[i].condition.sequence].push_back(i);
  for (auto& [seq, idx] : train_by_seq) {
    idx = capped(train, idx, ec.max_real_per_sequence, cfg.seed, "eval_latent/cap/" + std::string(to_string(seq)));
  }

  json results;
  results["per_sequence"] = json::array();
  std::vector<AurocRow> rows;
  for (const Sequence seq : kAllSequences) {
    const std::string name(to_string(seq));
    if (train_by_seq[seq].empty() || test_by_seq[seq].empty()) {
      say(opt, "warning: no real " + name + " latents in train or test; sequence skipped");
      continue;
    }
    const torch::Tensor real_train = model.stats.standardize(stack_records(train, train_by_seq[seq]));
    const torch::Tensor real_test = model.stats.standardize(stack_records(test, test_by_seq[seq]));
    at::Generator gen_train = make_generator(cfg.seed, "eval_latent/synthetic/" + name + "/train");
    const torch::Tensor synth_train = model.stats.standardize(
        sample_latents(model, {seq, Abnormality::Null}, real_train.size(0), w, n_steps, batch, gen_train));
    std::vector<torch::Tensor> synth_tests;
    for (int k = 0; k < ec.test_sets; ++k) {
      at::Generator g = make_generator(cfg.seed, "eval_latent/synthetic/" + name + "/test" + std::to_string(k + 1));
      synth_tests.push_back(
          model.stats.standardize(sample_latents(model, {seq, Abnormality::Null}, real_test.size(0), w, n_steps, batch, g)));
    }
    const DiscriminatorResult r =
        train_discriminator(real_train, synth_train, real_test, synth_tests, ec.classifier, ClassifierInput::Latent);
    say(opt, name + " real vs synthetic AUROC " + fixed(r.mean) + " +- " + fixed(r.std));
    json j = discriminator_json(r);
    j["sequence"] = name;
    j["n_real_train"] = real_train.size(0);
    j["n_real_test"] = real_test.size(0);
    results["per_sequence"].push_back(j);
    add_rows(rows, r, "latent_fidelity", name);
  }

  // Control: two disjoint halves of the real data, split by volume inside each sequence.
  std::vector<std::size_t> pooled_train;
  for (const auto& [seq, idx] : train_by_seq) pooled_train.insert(pooled_train.end(), idx.begin(), idx.end());
  std::sort(pooled_train.begin(), pooled_train.end());
  RecordSet held = val;
  for (std::size_t i = 0; i < test.size(); ++i) held.append(test.record(i), test.meta[i]);
  const auto train_halves = alternate_halves(train, pooled_train);
  const auto test_halves = alternate_halves(held, iota_indices(held.size()));
  if (!train_halves[0].empty() && !train_halves[1].empty() && !test_halves[0].empty() && !test_halves[1].empty()) {
    const DiscriminatorResult control = train_discriminator(
        model.stats.standardize(stack_records(train, train_halves[0])),
        model.stats.standardize(stack_records(train, train_halves[1])),
        model.stats.standardize(stack_records(held, test_halves[0])),
        {model.stats.standardize(stack_records(held, test_halves[1]))}, ec.classifier, ClassifierInput::Latent);
    say(opt, "control real vs real AUROC " + fixed(control.mean) + " +- " + fixed(control.std));
    results["control"] = discriminator_json(control);
    results["control"]["n_train"] = {train_halves[0].size(), train_halves[1].size()};
    results["control"]["n_test"] = {test_halves[0].size(), test_halves[1].size()};
    add_rows(rows, control, "latent_control", "real_vs_real");
  } else {
    say(opt, "warning: too few volumes for the real-vs-real control");
  }

  // Real against Gaussian noise with the latent statistics.
  {
    std::vector<std::size_t> pooled_test = iota_indices(test.size());
    const torch::Tensor real_train = model.stats.standardize(stack_records(train, pooled_train));
    const torch::Tensor real_test = model.stats.standardize(stack_records(test, pooled_test));
    at::Generator g = make_generator(cfg.seed, "eval_latent/noise");
    const torch::Tensor noise_train = torch::randn(real_train.sizes(), g, torch::kFloat);
    const torch::Tensor noise_test = torch::randn(real_test.sizes(), g, torch::kFloat);
    const DiscriminatorResult noise =
        train_discriminator(real_train, noise_train, real_test, {noise_test}, ec.classifier, ClassifierInput::Latent);
    say(opt, "real vs noise AUROC " + fixed(noise.mean) + " +- " + fixed(noise.std));
    results["noise"] = discriminator_json(noise);
    add_rows(rows, noise, "latent_noise", "real_vs_noise");
  }

  write_json(L.eval_latent() / "results.json", results);
  write_text_atomic(L.eval_latent() / "aurocs.tsv", format_results_tsv(rows));
  freeze_config(L.eval_latent(), cfg);
  write_timing(L.eval_latent(), clock);
}

void cmd_eval_downstream(const ExperimentConfig& cfg, const RunOptions& opt) {
  const Stopwatch clock;
  const RunLayout L{cfg.out};
  require_artifact(L.stage2_checkpoint());
  require_artifact(L.cvae_checkpoint());
  require_records(L.patches("train"));
  require_records(L.patches("test"));
  prepare_output(L.eval_downstream(), opt.force);
  const EvalDownstreamConfig& dc = cfg.eval_downstream;
  for (const double f : dc.substitution_fractions) check_fraction(f);
  for (const double f : dc.additive_fractions) check_fraction(f);

  DownstreamData data;
  data.train = filter(read_records(L.patches("train")), labeled);
  data.test = filter(read_records(L.patches("test")), labeled);
  if (fs::exists(L.external() / "index.json")) data.external = read_records(L.external());
  const CompositionPlan plan(data.train, cfg.seed);

  FlowModel flow = FlowModel::load(L.stage2_checkpoint());
  CvaeModel cvae = CvaeModel::load(L.cvae_checkpoint());
  data.synthetic.shape = {2, kPatchSize, kPatchSize};
  json pool = json::array();
  for (const auto& [group, need] : plan.pool_requirement()) {
    const auto& [seq, abn] = group;
    const std::string name = std::string(to_string(seq)) + "/" + std::string(to_string(abn));
    at::Generator gen = make_generator(cfg.seed, "eval_downstream/pool/" + name);
    const ConditionLabel cond{seq, abn};
    const torch::Tensor z = sample_latents(flow, cond, static_cast<std::int64_t>(need), cfg.sampler.w_stage2,
                                           cfg.sampler.n_steps, cfg.sampler.batch_size, gen);
    for (std::int64_t b = 0; b < z.size(0); b += 64) {
      const torch::Tensor zb = z.slice(0, b, std::min<std::int64_t>(z.size(0), b + 64));
      const torch::Tensor x = cvae.decode(zb, sequence_ids(std::vector<ConditionLabel>(static_cast<std::size_t>(zb.size(0)), cond)));
      for (std::int64_t i = 0; i < x.size(0); ++i) {
        RecordMeta m;
        m.volume_id = "synthetic/" + name + "/" + std::to_string(b + i);
        m.condition = cond;
        m.volume_class = abn == Abnormality::Abnormal ? VolumeClass::Abnormal : VolumeClass::Normal;
        m.provenance = Provenance::Synthetic;
        data.synthetic.append(to_vector(x[i]), m);
      }
    }
    pool.push_back({{"sequence", std::string(to_string(seq))}, {"abnormality", std::string(to_string(abn))}, {"count", need}});
    say(opt, "synthetic pool " + name + ": " + std::to_string(need));
  }
  write_records(L.eval_downstream() / "synthetic", data.synthetic);

  DownstreamRunner runner(data, dc.classifier);
  runner.progress = opt.log;
  std::vector<AurocRow> rows;
  if (dc.run_substitution) {
    auto r = run_substitution(plan, runner, data, dc.substitution_fractions);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (dc.run_additive) {
    auto r = run_additive(plan, runner, data, dc.additive_fractions);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  rows = unique_rows(rows);
  write_text_atomic(L.eval_downstream() / "results.tsv", format_results_tsv(rows));

  json compositions = json::array();
  for (const double f : dc.substitution_fractions) {
    const Composition c = plan.substitution(f, data.synthetic);
    compositions.push_back({{"experiment", "substitution"}, {"fraction", f}, {"real", c.real.size()},
                            {"synthetic", c.synthetic.size()}, {"real_volumes", plan.real_volumes(f).size()}});
  }
  for (const double f : dc.additive_fractions) {
    const Composition c = plan.additive(f, data.synthetic);
    compositions.push_back({{"experiment", "additive"}, {"fraction", f}, {"real", c.real.size()},
                            {"synthetic", c.synthetic.size()}});
  }
  write_json(L.eval_downstream() / "summary.json", {{"pool", pool},
                                                    {"compositions", compositions},
                                                    {"classifiers_trained", runner.trained()},
                                                    {"real_train", data.train.size()},
                                                    {"real_test", data.test.size()},
                                                    {"external", data.external ? data.external->size() : 0}});
  freeze_config(L.eval_downstream(), cfg);
  write_timing(L.eval_downstream(), clock);
}

// ---- report --------------------------------------------------------------------------------

void cmd_report(const ExperimentConfig& cfg, const RunOptions& opt) {
  const Stopwatch clock;
  const RunLayout L{cfg.out};
  require_artifact(L.eval_downstream() / "results.tsv");
  prepare_output(L.report(), opt.force);
  std::vector<AurocRow> rows = parse_results_tsv(read_text(L.eval_downstream() / "results.tsv"));
  const std::vector<AurocRow> downstream = rows;
  if (fs::exists(L.eval_latent() / "aurocs.tsv")) {
    auto r = parse_results_tsv(read_text(L.eval_latent() / "aurocs.tsv"));
    rows.insert(rows.end(), r.begin(), r.end());
  }
  rows = unique_rows(rows);
  write_text_atomic(L.report() / "results.tsv", format_results_tsv(rows));

  std::set<std::string> splits;
  for (const auto& r : downstream) splits.insert(r.split);
  std::vector<std::string> plots;
  for (const auto& [experiment, label] : {std::pair<std::string, std::string>{"substitution", "real fraction"},
                                          {"additive", "added synthetic fraction"}}) {
    for (const auto& split : splits) {
      if (curves(downstream, experiment, split).empty()) continue;
      const std::string file = experiment + (split == "test" ? "" : "_" + split) + ".svg";
      write_text_atomic(L.report() / file, render_curve_svg(downstream, experiment, split, label));
      plots.push_back(file);
    }
  }

  std::ostringstream md;
  md << "# Run summary\n\n";
  if (fs::exists(L.cvae() / "quality.json")) {
    const json q = read_json(L.cvae() / "quality.json");
    md << "## Reconstruction (test split)\n\n| phase coherence | SSIM | PSNR (dB) | patches |\n|---|---|---|---|\n";
    md << "| " << fixed(q.at("coherence").get<double>()) << " | " << fixed(q.at("ssim").get<double>()) << " | "
       << fixed(q.at("psnr").get<double>(), 2) << " | " << q.at("count").get<std::size_t>() << " |\n\n";
  }
  if (fs::exists(L.eval_latent() / "results.json")) {
    const json r = read_json(L.eval_latent() / "results.json");
    md << "## Real vs synthetic latents\n\n| sequence | AUROC mean | AUROC std |\n|---|---|---|\n";
    for (const json& s : r.at("per_sequence")) {
      md << "| " << s.at("sequence").get<std::string>() << " | " << fixed(s.at("mean").get<double>()) << " | "
         << fixed(s.at("std").get<double>()) << " |\n";
    }
    for (const char* key : {"control", "noise"}) {
      if (r.contains(key)) {
        md << "| " << (std::string(key) == "control" ? "real vs real (control)" : "real vs noise") << " | "
           << fixed(r.at(key).at("mean").get<double>()) << " | " << fixed(r.at(key).at("std").get<double>()) << " |\n";
      }
    }
    md << "\n";
  }
  for (const auto& split : splits) {
    md << "## Downstream AUROC (" << split << ")\n\n| experiment | fraction | condition | mean | std | seeds |\n|---|---|---|---|---|---|\n";
    for (const std::string experiment : {"baseline", "substitution", "additive"}) {
      for (const auto& [cond, pts] : curves(downstream, experiment, split)) {
        for (const auto& p : pts) {
          md << "| " << experiment << " | " << fixed(p.fraction, 1) << " | " << cond << " | " << fixed(p.mean) << " | "
             << fixed(p.std) << " | " << p.count << " |\n";
        }
      }
    }
    md << "\n";
  }
  for (const auto& p : plots) md << "![" << p << "](" << p << ")\n";
  write_text_atomic(L.report() / "summary.md", md.str());
  say(opt, "report written to " + L.report().string());
  freeze_config(L.report(), cfg);
  write_timing(L.report(), clock);
}

}  // namespace cmri

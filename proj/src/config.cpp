#include "cmri/config.hpp"

#include <cmath>
#include <set>

#include "cmri/archive.hpp"
#include "cmri/error.hpp"

namespace cmri {

namespace {

// Each section is described once; the same description drives reading and writing.

template <typename V>
void visit(V& v, PhantomConfig& c) {
  v("volumes_per_group", c.volumes_per_group);
  v("rows", c.rows);
  v("cols", c.cols);
  v("slices", c.slices);
  v("coils", c.coils);
  v("snr_db", c.snr_db);
  v("lesion_radius_min", c.lesion_radius_min);
  v("lesion_radius_max", c.lesion_radius_max);
  v("lesion_contrast", c.lesion_contrast);
  v("lesion_phase_amplitude", c.lesion_phase_amplitude);
  v("max_lesions", c.max_lesions);
}

template <typename V>
void visit(V& v, ExternalConfig& c) {
  v("volumes_per_group", c.volumes_per_group);
  v("rows", c.rows);
  v("cols", c.cols);
}

template <typename V>
void visit(V& v, PatchingConfig& c) {
  v("min_mask_coverage", c.min_mask_coverage);
  v("min_box_overlap", c.min_box_overlap);
  v("min_per_volume", c.min_per_volume);
  v("max_per_volume", c.max_per_volume);
  v("min_per_box", c.min_per_box);
  v("max_per_box", c.max_per_box);
  v("patches_per_patch_area", c.patches_per_patch_area);
  v("max_attempts", c.max_attempts);
  v("random_patches_per_volume", c.random_patches_per_volume);
  v("resize_to", c.resize_to);
}

template <typename V>
void visit(V& v, CvaeConfig& c) {
  v("channels", c.channels);
  v("res_blocks", c.res_blocks);
  v("lambda_grad", c.lambda_grad);
  v("lambda_kl", c.lambda_kl);
  v("lr", c.lr);
  v("batch_size", c.batch_size);
  v("epochs", c.epochs);
}

template <typename V>
void visit(V& v, FlowConfig& c) {
  v("base_channels", c.base_channels);
  v("lr", c.lr);
  v("batch_size", c.batch_size);
  v("stage1_steps", c.stage1_steps);
  v("snapshots", c.snapshots);
  v("ema_decay", c.ema_decay);
  v("cond_dropout", c.cond_dropout);
  v("stage2_phase_a_steps", c.stage2_phase_a_steps);
  v("stage2_phase_b_steps", c.stage2_phase_b_steps);
  v("stage2_lr", c.stage2_lr);
  v("pretrained_lr_ratio", c.pretrained_lr_ratio);
  v("stage2_cond_dropout", c.stage2_cond_dropout);
}

template <typename V>
void visit(V& v, SamplerConfig& c) {
  v("n_steps", c.n_steps);
  v("w_stage1", c.w_stage1);
  v("w_stage2", c.w_stage2);
  v("batch_size", c.batch_size);
}

template <typename V>
void visit(V& v, SampleConfig& c) {
  v("n", c.n);
  v("stage", c.stage);
  v("sequence", c.sequence);
  v("abnormality", c.abnormality);
  v("w", c.w);
}

template <typename V>
void visit(V& v, ClassifierTrainConfig& c) {
  v("seeds", c.seeds);
  v("steps", c.steps);
  v("batch_size", c.batch_size);
  v("lr", c.lr);
  v("weight_decay", c.weight_decay);
  v("mixup_alpha", c.mixup_alpha);
  v("ema_decay", c.ema_decay);
  v("augment", c.augment);
  v("balanced", c.balanced);
}

template <typename V>
void visit(V& v, EvalLatentConfig& c) {
  v.section("classifier", c.classifier);
  v("test_sets", c.test_sets);
  v("max_real_per_sequence", c.max_real_per_sequence);
}

template <typename V>
void visit(V& v, EvalDownstreamConfig& c) {
  v.section("classifier", c.classifier);
  v("substitution_fractions", c.substitution_fractions);
  v("additive_fractions", c.additive_fractions);
  v("run_substitution", c.run_substitution);
  v("run_additive", c.run_additive);
}

template <typename V>
void visit(V& v, ExperimentConfig& c) {
  v("seed", c.seed);
  v("out", c.out);
  v("workers", c.workers);
  v.section("phantom", c.phantom);
  v.section("external", c.external);
  v.section("patching", c.patching);
  v.section("cvae", c.cvae);
  v.section("flow", c.flow);
  v.section("sampler", c.sampler);
  v.section("sample", c.sample);
  v.section("eval_latent", c.eval_latent);
  v.section("eval_downstream", c.eval_downstream);
}

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(where() + ": expected an object");
  }

  template <typename T>
  void operator()(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string p = join(path_, key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ValidationError(p + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) throw ValidationError(p + ": expected an integer");
      if (std::is_unsigned_v<T> && it->is_number_integer() && !it->is_number_unsigned()) {
        throw ValidationError(p + ": expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ValidationError(p + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ValidationError(p + ": expected a string");
    } else {
      if (!it->is_array()) throw ValidationError(p + ": expected an array");
    }
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(p + ": " + e.what());
    }
  }

  template <typename S>
  void section(const char* key, S& s) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    Reader inner(*it, join(path_, key));
    visit(inner, s);
    inner.finish();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ValidationError("unknown config key: " + join(path_, it.key()));
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  explicit Writer(nlohmann::json& j) : j_(j) { j_ = nlohmann::json::object(); }

  template <typename T>
  void operator()(const char* key, T& value) {
    j_[key] = value;
  }

  template <typename S>
  void section(const char* key, S& s) {
    Writer inner(j_[key]);
    visit(inner, s);
  }

 private:
  nlohmann::json& j_;
};

void require(bool ok, const std::string& key, const std::string& rule) {
  if (!ok) throw ValidationError(key + ": " + rule);
}

void validate_classifier(const ClassifierTrainConfig& c, const std::string& path) {
  require(!c.seeds.empty(), path + ".seeds", "must not be empty");
  std::set<std::uint64_t> distinct(c.seeds.begin(), c.seeds.end());
  require(distinct.size() == c.seeds.size(), path + ".seeds", "must be distinct");
  require(c.steps >= 1, path + ".steps", "must be >= 1");
  require(c.batch_size >= 2, path + ".batch_size", "must be >= 2");
  require(c.lr > 0, path + ".lr", "must be > 0");
  require(c.weight_decay >= 0, path + ".weight_decay", "must be >= 0");
  require(c.mixup_alpha > 0, path + ".mixup_alpha", "must be > 0");
  require(c.ema_decay >= 0 && c.ema_decay <= 1, path + ".ema_decay", "must be in [0, 1]");
}

void validate_fractions(const std::vector<double>& f, const std::string& key) {
  for (double x : f) {
    const double tenths = x * 10.0;
    require(x >= 0 && x <= 1 && std::abs(tenths - std::round(tenths)) < 1e-9, key,
            "fractions must be multiples of 0.1 in [0, 1]");
  }
}

}  // namespace

PhantomSpec ExperimentConfig::phantom_spec() const {
  PhantomSpec s;
  s.seed = seed;
  s.volumes_per_group = phantom.volumes_per_group;
  s.rows = static_cast<std::size_t>(phantom.rows);
  s.cols = static_cast<std::size_t>(phantom.cols);
  s.slices = static_cast<std::size_t>(phantom.slices);
  s.coils = static_cast<std::size_t>(phantom.coils);
  s.snr_db = phantom.snr_db;
  s.lesion.radius_min = phantom.lesion_radius_min;
  s.lesion.radius_max = phantom.lesion_radius_max;
  s.lesion.contrast = phantom.lesion_contrast;
  s.lesion.phase_amplitude = phantom.lesion_phase_amplitude;
  s.lesion.max_lesions = phantom.max_lesions;
  return s;
}

PatchingOptions ExperimentConfig::patching_options() const {
  PatchingOptions o;
  o.min_mask_coverage = patching.min_mask_coverage;
  o.min_box_overlap = patching.min_box_overlap;
  o.min_per_volume = patching.min_per_volume;
  o.max_per_volume = patching.max_per_volume;
  o.min_per_box = patching.min_per_box;
  o.max_per_box = patching.max_per_box;
  o.patches_per_patch_area = patching.patches_per_patch_area;
  o.max_attempts = patching.max_attempts;
  o.random_patches_per_volume = patching.random_patches_per_volume;
  return o;
}

void ExperimentConfig::validate() const {
  require(workers >= 1, "workers", "must be >= 1");
  require(!out.empty(), "out", "must not be empty");
  try {
    phantom_spec().validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("phantom: ") + e.what());
  }
  require(external.volumes_per_group >= 0, "external.volumes_per_group", "must be >= 0");
  require(external.rows >= 96 && external.cols >= 96, "external.rows", "matrix must be at least 96x96");
  require(patching.min_mask_coverage >= 0 && patching.min_mask_coverage <= 1,
          "patching.min_mask_coverage", "must be in [0, 1]");
  require(patching.min_box_overlap > 0 && patching.min_box_overlap <= 1, "patching.min_box_overlap",
          "must be in (0, 1]");
  require(patching.min_per_volume >= 1 && patching.min_per_volume <= patching.max_per_volume,
          "patching.min_per_volume", "must be in [1, max_per_volume]");
  require(patching.min_per_box >= 1 && patching.min_per_box <= patching.max_per_box,
          "patching.min_per_box", "must be in [1, max_per_box]");
  require(patching.max_attempts >= 1, "patching.max_attempts", "must be >= 1");
  require(patching.random_patches_per_volume >= patching.min_per_volume &&
              patching.random_patches_per_volume <= patching.max_per_volume,
          "patching.random_patches_per_volume", "must be in [min_per_volume, max_per_volume]");
  require(patching.resize_to >= 96, "patching.resize_to", "must be >= 96");
  require(cvae.channels >= 8 && cvae.channels % 8 == 0, "cvae.channels", "must be a positive multiple of 8");
  require(cvae.res_blocks >= 1, "cvae.res_blocks", "must be >= 1");
  require(cvae.lambda_grad >= 0 && std::isfinite(cvae.lambda_grad), "cvae.lambda_grad", "must be finite and >= 0");
  require(cvae.lambda_kl >= 0 && std::isfinite(cvae.lambda_kl), "cvae.lambda_kl", "must be finite and >= 0");
  require(cvae.lr > 0, "cvae.lr", "must be > 0");
  require(cvae.batch_size >= 1, "cvae.batch_size", "must be >= 1");
  require(cvae.epochs >= 1, "cvae.epochs", "must be >= 1");
  require(flow.base_channels >= 8 && flow.base_channels % 8 == 0, "flow.base_channels",
          "must be a positive multiple of 8");
  require(flow.lr > 0, "flow.lr", "must be > 0");
  require(flow.batch_size >= 1, "flow.batch_size", "must be >= 1");
  require(flow.stage1_steps >= 1, "flow.stage1_steps", "must be >= 1");
  require(flow.snapshots >= 1 && flow.snapshots <= flow.stage1_steps, "flow.snapshots",
          "must be in [1, stage1_steps]");
  require(flow.ema_decay >= 0 && flow.ema_decay <= 1, "flow.ema_decay", "must be in [0, 1]");
  require(flow.cond_dropout >= 0 && flow.cond_dropout < 1, "flow.cond_dropout", "must be in [0, 1)");
  require(flow.stage2_phase_a_steps >= 0, "flow.stage2_phase_a_steps", "must be >= 0");
  require(flow.stage2_phase_b_steps >= 0, "flow.stage2_phase_b_steps", "must be >= 0");
  require(flow.stage2_lr > 0, "flow.stage2_lr", "must be > 0");
  require(flow.pretrained_lr_ratio > 0 && flow.pretrained_lr_ratio <= 1, "flow.pretrained_lr_ratio",
          "must be in (0, 1]");
  require(flow.stage2_cond_dropout >= 0 && flow.stage2_cond_dropout < 1, "flow.stage2_cond_dropout",
          "must be in [0, 1)");
  require(sampler.n_steps >= 1, "sampler.n_steps", "must be >= 1");
  require(sampler.w_stage1 >= 1, "sampler.w_stage1", "guidance must be >= 1");
  require(sampler.w_stage2 >= 1, "sampler.w_stage2", "guidance must be >= 1");
  require(sampler.batch_size >= 1, "sampler.batch_size", "must be >= 1");
  require(sample.n >= 1, "sample.n", "must be >= 1");
  require(sample.stage == "stage1" || sample.stage == "stage2", "sample.stage", "must be stage1 or stage2");
  try {
    parse_sequence(sample.sequence);
    parse_abnormality(sample.abnormality);
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("sample: ") + e.what());
  }
  require(sample.w >= 1, "sample.w", "guidance must be >= 1");
  validate_classifier(eval_latent.classifier, "eval_latent.classifier");
  require(eval_latent.test_sets >= 1, "eval_latent.test_sets", "must be >= 1");
  require(eval_latent.max_real_per_sequence >= 0, "eval_latent.max_real_per_sequence", "must be >= 0");
  validate_classifier(eval_downstream.classifier, "eval_downstream.classifier");
  validate_fractions(eval_downstream.substitution_fractions, "eval_downstream.substitution_fractions");
  validate_fractions(eval_downstream.additive_fractions, "eval_downstream.additive_fractions");
}

ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig c;
  Reader r(j, "");
  visit(r, c);
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError(path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  ExperimentConfig copy = c;
  Writer w(j);
  visit(w, copy);
  return j;
}

}  // namespace cmri

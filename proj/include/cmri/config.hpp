#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmri/patching.hpp"
#include "cmri/phantom.hpp"

namespace cmri {

struct PhantomConfig {
  int volumes_per_group = 22;
  int rows = 320;
  int cols = 320;
  int slices = 8;
  int coils = 4;
  double snr_db = 30.0;
  double lesion_radius_min = 8.0;
  double lesion_radius_max = 18.0;
  double lesion_contrast = 0.35;
  double lesion_phase_amplitude = 1.0;
  int max_lesions = 3;
};

// Held-out volumes with a different acquisition matrix, resized in k-space
// and grid-patched for volume-level scoring.
struct ExternalConfig {
  int volumes_per_group = 0;  // 0 disables the external set
  int rows = 256;
  int cols = 288;
};

struct PatchingConfig {
  double min_mask_coverage = 0.80;
  double min_box_overlap = 0.25;
  int min_per_volume = 10;
  int max_per_volume = 40;
  int min_per_box = 4;
  int max_per_box = 20;
  double patches_per_patch_area = 10.0;
  int max_attempts = 200;
  int random_patches_per_volume = 12;
  int resize_to = 320;
};

struct CvaeConfig {
  int channels = 32;
  int res_blocks = 1;
  double lambda_grad = 1.0;
  double lambda_kl = 1e-4;
  double lr = 1e-3;
  int batch_size = 32;
  int epochs = 12;
};

struct FlowConfig {
  int base_channels = 16;
  double lr = 2e-4;
  int batch_size = 64;
  int stage1_steps = 2000;
  int snapshots = 1;  // evenly spaced EMA snapshots kept as selection candidates
  double ema_decay = 0.999;
  double cond_dropout = 0.10;
  int stage2_phase_a_steps = 200;
  int stage2_phase_b_steps = 800;
  double stage2_lr = 2e-4;
  double pretrained_lr_ratio = 0.1;
  double stage2_cond_dropout = 0.10;
};

struct SamplerConfig {
  int n_steps = 50;
  double w_stage1 = 1.0;
  double w_stage2 = 2.0;
  int batch_size = 64;
};

// What cmd_sample draws.
struct SampleConfig {
  int n = 8;
  std::string stage = "stage2";
  std::string sequence = "AXFLAIR";
  std::string abnormality = "abnormal";
  double w = 2.0;
};

struct ClassifierTrainConfig {
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  int steps = 600;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double mixup_alpha = 0.2;
  double ema_decay = 0.99;
  bool augment = true;
  bool balanced = true;
};

struct EvalLatentConfig {
  ClassifierTrainConfig classifier{.augment = false};
  int test_sets = 4;
  int max_real_per_sequence = 0;  // 0 keeps every real latent
};

struct EvalDownstreamConfig {
  ClassifierTrainConfig classifier;
  std::vector<double> substitution_fractions = {1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0};
  std::vector<double> additive_fractions = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  bool run_substitution = true;
  bool run_additive = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out = "run";
  int workers = 1;
  PhantomConfig phantom;
  ExternalConfig external;
  PatchingConfig patching;
  CvaeConfig cvae;
  FlowConfig flow;
  SamplerConfig sampler;
  SampleConfig sample;
  EvalLatentConfig eval_latent;
  EvalDownstreamConfig eval_downstream;

  PhantomSpec phantom_spec() const;
  PatchingOptions patching_options() const;
  // Throws ValidationError naming the offending key.
  void validate() const;
};

/// Strict parse: every key must be known (ValidationError with the key path
/// otherwise); missing keys keep their defaults.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& c);

}  // namespace cmri

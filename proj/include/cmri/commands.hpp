#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "cmri/archive.hpp"
#include "cmri/config.hpp"
#include "cmri/cvae.hpp"

namespace cmri {

// Where each command reads and writes, relative to the run directory.
struct RunLayout {
  fs::path root;

  fs::path dataset() const { return root / "dataset"; }
  fs::path patches(std::string_view split) const { return dataset() / "patches" / std::string(split); }
  fs::path external() const { return dataset() / "external"; }
  fs::path cvae() const { return root / "cvae"; }
  fs::path cvae_checkpoint() const { return cvae() / "cvae.ckpt"; }
  fs::path latents(std::string_view split) const { return root / "latents" / std::string(split); }
  fs::path stage1() const { return root / "stage1"; }
  fs::path stage1_checkpoint() const { return stage1() / "flow.ckpt"; }
  fs::path stage2() const { return root / "stage2"; }
  fs::path stage2_checkpoint() const { return stage2() / "flow.ckpt"; }
  fs::path samples() const { return root / "samples"; }
  fs::path decoded() const { return root / "decoded"; }
  fs::path eval_latent() const { return root / "eval_latent"; }
  fs::path eval_downstream() const { return root / "eval_downstream"; }
  fs::path report() const { return root / "report"; }
};

struct RunOptions {
  bool force = false;  // replace existing outputs
  ProgressFn log;
};

// Config file (or defaults) with command-line overrides applied, validated.
ExperimentConfig resolve_config(const std::optional<fs::path>& config_path, std::optional<std::uint64_t> seed,
                                const std::optional<std::string>& out, std::optional<int> workers);

void cmd_prepare(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_train_ae(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_encode(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_train_fm(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_finetune_fm(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_sample(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_decode(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_eval_latent(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_eval_downstream(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_report(const ExperimentConfig& cfg, const RunOptions& opt);

inline constexpr std::string_view kLatentMagic = "CMRILAT1";
inline constexpr std::string_view kPatchMagic = "CMRIPAT1";

}  // namespace cmri

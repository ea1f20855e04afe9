#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "cmri/commands.hpp"
#include "cmri/error.hpp"

using cmri::ExperimentConfig;
using cmri::RunOptions;

namespace {

using Command = void (*)(const ExperimentConfig&, const RunOptions&);

const std::map<std::string, std::pair<Command, std::string>>& commands() {
  static const std::map<std::string, std::pair<Command, std::string>> table = {
      {"prepare", {cmri::cmd_prepare, "generate phantom volumes, patches and the split manifest"}},
      {"train-ae", {cmri::cmd_train_ae, "train the sequence-conditioned autoencoder"}},
      {"encode", {cmri::cmd_encode, "encode every patch split into latents"}},
      {"train-fm", {cmri::cmd_train_fm, "stage 1: sequence-conditioned flow matching"}},
      {"finetune-fm", {cmri::cmd_finetune_fm, "stage 2: add abnormality conditioning"}},
      {"sample", {cmri::cmd_sample, "draw latents from a flow checkpoint"}},
      {"decode", {cmri::cmd_decode, "decode sampled latents into patches"}},
      {"eval-latent", {cmri::cmd_eval_latent, "real-vs-synthetic latent discrimination"}},
      {"eval-downstream", {cmri::cmd_eval_downstream, "substitution and additive experiments"}},
      {"report", {cmri::cmd_report, "results table, plots and summary"}},
  };
  return table;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Complex-valued MRI patch synthesis and evaluation"};
  app.require_subcommand(1);
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> workers;
  bool force = false;
  for (const auto& [name, entry] : commands()) {
    CLI::App* sub = app.add_subcommand(name, entry.second);
    sub->add_option("--config", config, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "global seed");
    sub->add_option("--out", out, "run directory");
    sub->add_option("--workers", workers, "worker count")->check(CLI::PositiveNumber);
    sub->add_flag("--force", force, "replace existing outputs");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    ExperimentConfig cfg = cmri::resolve_config(config ? std::optional<cmri::fs::path>(*config) : std::nullopt, seed,
                                                out, workers);
    torch::set_num_threads(cfg.workers);
    RunOptions opt;
    opt.force = force;
    opt.log = [](const std::string& s) { std::cerr << s << '\n'; };
    commands().at(sub->get_name()).first(cfg, opt);
    return 0;
  } catch (const cmri::MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const cmri::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}

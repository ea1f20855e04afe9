#pragma once

#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cmri/archive.hpp"
#include "cmri/config.hpp"
#include "cmri/cvae.hpp"
#include "cmri/labels.hpp"

namespace cmri {

// x_t = (1 - t) eps + t x0; t = 0 is pure noise, t = 1 the data.
torch::Tensor interpolate(const torch::Tensor& x0, const torch::Tensor& eps, double t);
// Per-sample times, t: [N].
torch::Tensor interpolate(const torch::Tensor& x0, const torch::Tensor& eps, const torch::Tensor& t);

// Mean squared error between v_pred and the path velocity x0 - eps.
torch::Tensor fm_loss(const torch::Tensor& v_pred, const torch::Tensor& x0, const torch::Tensor& eps);
// Its closed-form gradient with respect to v_pred.
torch::Tensor fm_loss_gradient(const torch::Tensor& v_pred, const torch::Tensor& x0, const torch::Tensor& eps);

/// v_uncond + w (v_cond - v_uncond). Throws std::invalid_argument for w < 1.
/// At w = 1 the result is v_cond itself.
torch::Tensor cfg_combine(const torch::Tensor& v_uncond, const torch::Tensor& v_cond, double w);

/// Heun predictor-corrector on a uniform grid from t = 0 to t = 1.
///
/// State needs x + y and double * x. Every step evaluates the field at both
/// ends of its interval, so the rule is the trapezoid rule for fields that
/// depend on t only.
template <typename State, typename Field>
State heun_integrate(State x, Field&& velocity, int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("heun_integrate: n_steps must be >= 1");
  const double h = 1.0 / n_steps;
  for (int i = 0; i < n_steps; ++i) {
    const double t0 = i * h;
    const double t1 = (i + 1 == n_steps) ? 1.0 : (i + 1) * h;
    const State k1 = velocity(x, t0);
    const State predicted = x + h * k1;
    const State k2 = velocity(predicted, t1);
    x = x + (0.5 * h) * (k1 + k2);
  }
  return x;
}

/// ema <- decay ema + (1 - decay) online, elementwise and in place.
/// Throws std::invalid_argument on count/shape mismatch or decay outside [0, 1].
void ema_update(std::vector<torch::Tensor>& ema, const std::vector<torch::Tensor>& online, double decay);

// Warmup: the effective decay is min(decay, (1 + step) / (10 + step)).
double ema_decay_at(double decay, long step);

// ---- velocity network ------------------------------------------------------

inline constexpr int kNullSequence = static_cast<int>(Sequence::Null);
inline constexpr int kNullAbnormality = static_cast<int>(Abnormality::Null);

// Sinusoidal features of t in [0, 1]: [N] -> [N, dim].
torch::Tensor time_features(const torch::Tensor& t, int dim);

struct CondResBlockImpl : torch::nn::Module {
  CondResBlockImpl(int in, int out, int cond_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear cond_proj{nullptr};
  int out_channels;
};
TORCH_MODULE(CondResBlock);

struct SelfAttentionImpl : torch::nn::Module {
  explicit SelfAttentionImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Conv2d qkv{nullptr}, proj{nullptr};
};
TORCH_MODULE(SelfAttention);

/// U-Net over 2x48x48 latents: levels 48/24/12 with widths (C, 2C, 2C),
/// self-attention at 12x12 and in the middle. Noise level and condition
/// embeddings are summed into one vector that modulates every residual block.
struct VelocityNetImpl : torch::nn::Module {
  explicit VelocityNetImpl(int base_channels);

  // x: [N, 2, 48, 48], t: [N], seq: [N] in [0, 5] (5 = null), path: [N] in
  // [0, 3] (3 = null). Path ids other than null need path conditioning.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& seq,
                        const torch::Tensor& path);

  // Adds the abnormality embedding (zero-initialized, so the network output is unchanged).
  void enable_path_conditioning();
  bool has_path_conditioning() const { return !path_embed.is_empty(); }

  int base_channels;
  int cond_dim;
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::Embedding seq_embed{nullptr}, path_embed{nullptr};
  torch::nn::Conv2d in_conv{nullptr}, down1{nullptr}, down2{nullptr}, up2{nullptr}, up1{nullptr},
      out_conv{nullptr};
  CondResBlock d1{nullptr}, d2{nullptr}, d3{nullptr}, m1{nullptr}, m2{nullptr}, u3{nullptr},
      u2{nullptr}, u1{nullptr};
  SelfAttention a3{nullptr}, am{nullptr}, au3{nullptr};
  torch::nn::GroupNorm out_norm{nullptr};
};
TORCH_MODULE(VelocityNet);

enum class FlowStage { Stage1, Stage2 };
std::string_view to_string(FlowStage s);

struct FlowModel {
  FlowStage stage = FlowStage::Stage1;
  int base_channels = 16;
  double ema_decay = 0.999;
  VelocityNet online{nullptr};
  VelocityNet ema{nullptr};
  LatentStats stats;
  SamplerConfig sampler;
  json log = json::array();

  FlowModel() = default;
  FlowModel(int base_channels, double ema_decay);

  void save(const fs::path& path) const;
  static FlowModel load(const fs::path& path);
};

// Unconditional branch of guidance: stage 1 drops both labels, stage 2 only the abnormality.
ConditionLabel unconditional_label(FlowStage stage, const ConditionLabel& cond);

/// Guided velocity of a network. At w = 1 only the conditional branch is evaluated.
torch::Tensor guided_velocity(VelocityNet& net, FlowStage stage, const torch::Tensor& x, double t,
                              const std::vector<ConditionLabel>& cond, double w);

/// Standardized-latent samples from the EMA network, de-standardized with the
/// model's latent statistics. Noise comes from gen; result is [N, 2, 48, 48].
torch::Tensor heun_sample(FlowModel& model, const std::vector<ConditionLabel>& cond, double w,
                          int n_steps, at::Generator& gen);

struct Stage1Result {
  FlowModel model;
  std::vector<FlowModel> snapshots;  // EMA snapshots, earliest first; the last is the final model
  long condition_draws = 0;
  long dropped_conditions = 0;
};

/// Flow-matching training with sequence conditioning; each sample's sequence
/// is replaced by the null token with probability cond_dropout.
Stage1Result train_stage1(const RecordSet& latents, const LatentStats& stats, const FlowConfig& config,
                          std::uint64_t seed, const ProgressFn& progress = {});

// Equal weight for every (sequence, abnormality) group present.
class BalancedSampler {
 public:
  explicit BalancedSampler(const std::vector<ConditionLabel>& labels);
  std::size_t draw(at::Generator& gen) const;
  std::size_t group_count() const { return groups_.size(); }

 private:
  std::vector<std::vector<std::size_t>> groups_;
};

struct Stage2Result {
  FlowModel model;
  long labeled_draws = 0;
  long abnormal_draws = 0;
  long condition_draws = 0;
  long dropped_conditions = 0;
};

/// Finetunes a stage-1 model on abnormality labels: phase A trains only the
/// new path embedding; phase B trains everything, pretrained parameters at
/// pretrained_lr_ratio times the learning rate. Starts from the stage-1 EMA
/// weights. Throws ValidationError when the input is not a stage-1 model.
Stage2Result train_stage2(const RecordSet& latents, const FlowModel& stage1, const FlowConfig& config,
                          std::uint64_t seed, const ProgressFn& progress = {});

// Parameters that stage 2 adds on top of a stage-1 network.
bool is_new_stage2_parameter(const std::string& name);

// Mean flow-matching loss on a latent set at fixed (t, eps) draws.
double flow_validation_loss(VelocityNet& net, const RecordSet& latents, const LatentStats& stats,
                            bool use_path, std::uint64_t seed, int batch_size = 64);

}  // namespace cmri

#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cmri/archive.hpp"
#include "cmri/config.hpp"

namespace cmri {

inline constexpr int kLatentChannels = 2;
inline constexpr int kLatentSize = 48;
inline constexpr std::size_t kLatentValues = kLatentChannels * kLatentSize * kLatentSize;

struct CvaeLossWeights {
  double lambda_grad = 1.0;
  double lambda_kl = 1e-4;

  void validate() const;  // finite and non-negative, else std::invalid_argument
};

struct CvaeLoss {
  torch::Tensor total, recon, grad, kl;  // scalars
};

/// Three-term objective.
///   recon: mean |recon - target| over all elements
///   grad:  average over the two image axes of the mean |d recon - d target|,
///          d a forward difference along that axis
///   kl:    mean of 0.5 (mu^2 + exp(logvar) - 1 - logvar)
///   total = recon + lambda_grad grad + lambda_kl kl
/// Tensors are [N, C, H, W]; mu/logvar may have any shape of their own.
CvaeLoss cvae_loss(const torch::Tensor& recon, const torch::Tensor& target, const torch::Tensor& mu,
                   const torch::Tensor& logvar, const CvaeLossWeights& w);

struct CvaeLossGradients {
  torch::Tensor recon, mu, logvar;
};

// Closed-form gradient of the total loss (sign(0) taken as 0).
CvaeLossGradients cvae_loss_gradients(const torch::Tensor& recon, const torch::Tensor& target,
                                      const torch::Tensor& mu, const torch::Tensor& logvar,
                                      const CvaeLossWeights& w);

// out = scale * features + shift, per channel; scale/shift are [N, C].
torch::Tensor film(const torch::Tensor& features, const torch::Tensor& scale, const torch::Tensor& shift);

// z = mu + exp(logvar / 2) * eps, eps ~ N(0, I).
torch::Tensor reparameterize(const torch::Tensor& mu, const torch::Tensor& logvar, at::Generator& gen);

// Residual block whose second normalization is modulated per sequence.
struct FilmResBlockImpl : torch::nn::Module {
  explicit FilmResBlockImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& seq);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::Embedding modulation{nullptr};  // sequence -> (scale - 1, shift)
  int channels;
};
TORCH_MODULE(FilmResBlock);

struct CvaeNetImpl : torch::nn::Module {
  CvaeNetImpl(int channels, int res_blocks);

  // x: [N, 2, 96, 96], seq: [N] sequence ids. Unknown ids throw std::invalid_argument.
  std::pair<torch::Tensor, torch::Tensor> encode(const torch::Tensor& x, const torch::Tensor& seq);
  torch::Tensor decode(const torch::Tensor& z, const torch::Tensor& seq);

  torch::nn::Conv2d enc_in{nullptr}, mu_head{nullptr}, logvar_head{nullptr}, dec_in{nullptr};
  torch::nn::ModuleList enc_blocks{nullptr}, dec_blocks{nullptr};
  torch::nn::ConvTranspose2d dec_out{nullptr};
};
TORCH_MODULE(CvaeNet);

struct LatentStats {
  std::array<double, kLatentChannels> mean{0.0, 0.0};
  std::array<double, kLatentChannels> std{1.0, 1.0};

  torch::Tensor standardize(const torch::Tensor& z) const;    // [N, 2, H, W]
  torch::Tensor destandardize(const torch::Tensor& z) const;
  static LatentStats compute(const torch::Tensor& z);
};

struct CvaeLogRow {
  int epoch = 0;
  int step = 0;
  double train_total = 0.0;
  double train_recon = 0.0;
  double val_total = 0.0;
};

struct CvaeModel {
  CvaeConfig config;
  CvaeNet net{nullptr};
  LatentStats stats;
  std::vector<CvaeLogRow> log;
  int best_epoch = 0;

  CvaeModel() = default;
  explicit CvaeModel(const CvaeConfig& c);

  void save(const fs::path& path) const;
  static CvaeModel load(const fs::path& path);

  // Encoder means for a batch of patches, in eval mode without gradients.
  torch::Tensor encode_mean(const torch::Tensor& patches, const torch::Tensor& seq);
  torch::Tensor decode(const torch::Tensor& latents, const torch::Tensor& seq);
};

// Mean loss of the model on a record set (encoder mean, no sampling).
double validation_loss(CvaeModel& model, const RecordSet& patches, const CvaeLossWeights& w,
                       int batch_size = 64);

using ProgressFn = std::function<void(const std::string&)>;

/// Adam on the three-term loss; validation loss after every epoch, the
/// best-validation weights are kept. Latent statistics are computed over
/// the training set at the end. Throws std::invalid_argument on empty data.
CvaeModel train_cvae(const RecordSet& train, const RecordSet& val, const CvaeConfig& config,
                     std::uint64_t seed, const ProgressFn& progress = {});

// Real latents (encoder means, un-standardized) for every patch.
RecordSet encode_records(CvaeModel& model, const RecordSet& patches, int batch_size = 64);

struct ReconstructionQuality {
  double coherence = 0.0;  // mean phase coherence
  double ssim = 0.0;       // mean magnitude SSIM
  double psnr = 0.0;       // mean magnitude PSNR
  std::size_t count = 0;
};
ReconstructionQuality reconstruction_quality(CvaeModel& model, const RecordSet& patches,
                                             int batch_size = 64);

}  // namespace cmri

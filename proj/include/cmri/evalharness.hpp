#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "cmri/archive.hpp"
#include "cmri/config.hpp"
#include "cmri/cvae.hpp"
#include "cmri/labels.hpp"

namespace cmri {

// ---- augmentation -----------------------------------------------------------------

struct AugmentParams {
  bool flip_h = false;     // mirror columns
  bool flip_v = false;     // mirror rows
  int rot90 = 0;           // quarter turns
  double zoom = 1.0;       // in [1, 1.2]
  double intensity = 1.0;  // in [0.9, 1.1]
};

AugmentParams draw_augment(at::Generator& gen);

/// Applies the same geometric transform to both channels of a [2, H, W]
/// patch: flips, rotation, bilinear zoom with a centre crop back to H x W,
/// then a common intensity factor.
torch::Tensor augment(const torch::Tensor& patch, const AugmentParams& p);
torch::Tensor augment(const torch::Tensor& patch, at::Generator& gen);

// lambda ~ Beta(alpha, alpha). Throws std::invalid_argument unless alpha > 0.
double draw_mixup_lambda(double alpha, at::Generator& gen);

struct Mixed {
  torch::Tensor x, y;
};
// x = l x1 + (1 - l) x2, y likewise.
Mixed mixup(const torch::Tensor& x1, const torch::Tensor& y1, const torch::Tensor& x2, const torch::Tensor& y2,
            double lambda);

/// Mean of the k largest probabilities, k = max(1, ceil(0.05 n)).
/// Throws std::invalid_argument on an empty list.
double aggregate_volume(std::span<const double> probs);

enum class Criterion { Minimize, Maximize };
// Index of the best metric; the earliest wins ties. Throws on an empty list.
std::size_t select_model(std::span<const double> metrics, Criterion criterion);

// ---- classifier ---------------------------------------------------------------------

enum class ClassifierInput { Latent, Patch };

struct SEBlockImpl : torch::nn::Module {
  explicit SEBlockImpl(int channels, int reduction = 4);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(SEBlock);

struct SEResBlockImpl : torch::nn::Module {
  SEResBlockImpl(int in, int out, int stride);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr}, skip_norm{nullptr};
  SEBlock se{nullptr};
};
TORCH_MODULE(SEResBlock);

/// Residual classifier with squeeze-and-excitation. The stem brings either
/// input kind (2x48x48 latents, 2x96x96 patches) to 24x24; three stages of
/// widths 16/32/64 follow, then global pooling and one logit.
struct ClassifierNetImpl : torch::nn::Module {
  explicit ClassifierNetImpl(ClassifierInput input);
  torch::Tensor forward(const torch::Tensor& x);  // [N] logits

  ClassifierInput input;
  torch::nn::Sequential stem{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(ClassifierNet);

struct TrainedClassifier {
  ClassifierNet ema{nullptr};  // evaluation weights
  long draws = 0;
  long positive_draws = 0;
};

/// Binary classifier on x [N, 2, H, W] with labels y in {0, 1}: AdamW, cosine
/// learning rate, BCE on mixup targets, EMA weights. With balanced sampling
/// each draw picks a class with probability 1/2. Augmentation draws come
/// from a stream of seed alone, so runs that share a seed share it.
/// Throws std::invalid_argument when a class is empty.
TrainedClassifier train_classifier(const torch::Tensor& x, const std::vector<int>& y, ClassifierInput input,
                                   const ClassifierTrainConfig& config, std::uint64_t seed);

// Probabilities of the positive class.
std::vector<double> predict(TrainedClassifier& c, const torch::Tensor& x, int batch_size = 128);

// ---- real vs synthetic --------------------------------------------------------------

struct DiscriminatorResult {
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> auroc;  // [seed][test set]
  double mean = 0.0;
  double std = 0.0;
};

/// Class 0 is real, class 1 synthetic. One classifier per seed of the config,
/// each scored on the real test set joined with every synthetic test set.
DiscriminatorResult train_discriminator(const torch::Tensor& real_train, const torch::Tensor& synth_train,
                                        const torch::Tensor& real_test,
                                        const std::vector<torch::Tensor>& synth_tests,
                                        const ClassifierTrainConfig& config, ClassifierInput input);

// ---- training-set compositions -------------------------------------------------------

// (sequence, patch label) of a training patch.
using PatchGroup = std::pair<Sequence, Abnormality>;

struct Composition {
  std::vector<std::size_t> real;       // indices into the real set
  std::vector<std::size_t> synthetic;  // indices into the synthetic pool
};

/// Nested training sets over the labeled real training patches. Volumes of
/// each (class, sequence) group are put in a seeded order; fraction f keeps
/// the first round(f n) of them. Synthetic patches are matched to real ones
/// by (sequence, patch label) and taken from the front of the pool in that
/// group, so both parts are nested across fractions.
class CompositionPlan {
 public:
  CompositionPlan(const RecordSet& real, std::uint64_t seed);

  /// Keeps fraction f of the volumes and replaces every removed patch by a
  /// synthetic patch of the same group. Throws ValidationError when the pool is short.
  Composition substitution(double fraction, const RecordSet& synthetic) const;
  /// All real patches plus round(f n_g) synthetic patches per patch group.
  Composition additive(double fraction, const RecordSet& synthetic) const;

  std::set<std::string> real_volumes(double fraction) const;
  // Synthetic patches needed per group to cover every fraction of both experiments.
  std::map<PatchGroup, std::size_t> pool_requirement() const;

 private:
  Composition take_synthetic(Composition c, const std::map<PatchGroup, std::size_t>& need,
                             const RecordSet& synthetic) const;

  const RecordSet* real_;
  std::map<std::pair<Sequence, VolumeClass>, std::vector<std::string>> order_;
  std::map<PatchGroup, std::size_t> real_count_;
};

// Throws std::invalid_argument unless f is a multiple of 0.1 in [0, 1].
void check_fraction(double f);

struct AurocRow {
  std::string experiment;
  double fraction = 0.0;
  std::string condition;
  std::uint64_t seed = 0;
  std::string split;
  double auroc = 0.0;
};

struct DownstreamData {
  RecordSet train;      // labeled real training patches
  RecordSet test;       // labeled real test patches
  RecordSet synthetic;  // decoded stage-2 samples
  std::optional<RecordSet> external;  // grid patches of differently sized volumes
};

// Trains one classifier per seed on each composition and caches the results,
// so identical compositions are trained once.
class DownstreamRunner {
 public:
  DownstreamRunner(const DownstreamData& data, const ClassifierTrainConfig& config);

  std::vector<AurocRow> run(const Composition& c, const std::string& experiment, double fraction,
                            const std::string& condition);
  long trained() const { return trained_; }
  ProgressFn progress;

 private:
  std::vector<std::pair<std::string, double>> evaluate(const Composition& c, std::uint64_t seed);

  const DownstreamData& data_;
  ClassifierTrainConfig config_;
  torch::Tensor test_x_, external_x_;
  std::vector<int> test_y_;
  std::map<std::string, std::vector<std::pair<std::string, double>>> cache_;
  long trained_ = 0;
};

// Baseline rows plus real-only and real+synthetic rows per fraction.
std::vector<AurocRow> run_substitution(const CompositionPlan& plan, DownstreamRunner& runner,
                                       const DownstreamData& data, std::span<const double> fractions);
std::vector<AurocRow> run_additive(const CompositionPlan& plan, DownstreamRunner& runner,
                                   const DownstreamData& data, std::span<const double> fractions);

// Class 1 for abnormal patches; records without a class label throw.
std::vector<int> abnormality_targets(const RecordSet& set, std::span<const std::size_t> indices);

}  // namespace cmri

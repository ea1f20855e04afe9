#include <algorithm>
#include <cmath>
#include <numbers>

#include "cmri/evalharness.hpp"
#include "cmri/flowmatch.hpp"
#include "cmri/rng.hpp"
#include "cmri/tensor_io.hpp"

namespace cmri {

namespace F = torch::nn::functional;

AugmentParams draw_augment(at::Generator& gen) {
  const torch::Tensor u = torch::rand({5}, gen, torch::kDouble);
  const auto a = u.accessor<double, 1>();
  AugmentParams p;
  p.flip_h = a[0] < 0.5;
  p.flip_v = a[1] < 0.5;
  p.rot90 = std::min(3, static_cast<int>(a[2] * 4.0));
  p.zoom = 1.0 + 0.2 * a[3];
  p.intensity = 0.9 + 0.2 * a[4];
  return p;
}

torch::Tensor augment(const torch::Tensor& patch, const AugmentParams& p) {
  if (patch.dim() != 3) throw std::invalid_argument("augment: expected [C, H, W]");
  if (!(p.zoom >= 1.0)) throw std::invalid_argument("augment: zoom must be >= 1");
  torch::Tensor x = patch;
  if (p.flip_h) x = x.flip({2});
  if (p.flip_v) x = x.flip({1});
  const int k = ((p.rot90 % 4) + 4) % 4;
  if (k != 0) x = torch::rot90(x, k, {1, 2});
  const auto h = x.size(1), w = x.size(2);
  const auto zh = static_cast<std::int64_t>(std::llround(static_cast<double>(h) * p.zoom));
  const auto zw = static_cast<std::int64_t>(std::llround(static_cast<double>(w) * p.zoom));
  if (zh != h || zw != w) {
    const torch::Tensor up = F::interpolate(
        x.unsqueeze(0), F::InterpolateFuncOptions().size(std::vector<std::int64_t>{zh, zw}).mode(torch::kBilinear).align_corners(false));
    x = up.squeeze(0).slice(1, (zh - h) / 2, (zh - h) / 2 + h).slice(2, (zw - w) / 2, (zw - w) / 2 + w);
  }
  if (p.intensity != 1.0) x = x * p.intensity;
  return x.contiguous();
}

torch::Tensor augment(const torch::Tensor& patch, at::Generator& gen) { return augment(patch, draw_augment(gen)); }

double draw_mixup_lambda(double alpha, at::Generator& gen) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("mixup: alpha must be > 0");
  const torch::Tensor g = at::_standard_gamma(torch::full({2}, alpha, torch::kDouble), gen);
  const double a = g[0].item<double>(), b = g[1].item<double>();
  if (a + b <= 0.0) return 0.5;
  return a / (a + b);
}

Mixed mixup(const torch::Tensor& x1, const torch::Tensor& y1, const torch::Tensor& x2, const torch::Tensor& y2,
            double lambda) {
  if (!x1.sizes().equals(x2.sizes()) || !y1.sizes().equals(y2.sizes())) {
    throw std::invalid_argument("mixup: shape mismatch");
  }
  if (lambda == 1.0) return {x1, y1};
  if (lambda == 0.0) return {x2, y2};
  return {lambda * x1 + (1.0 - lambda) * x2, lambda * y1 + (1.0 - lambda) * y2};
}

double aggregate_volume(std::span<const double> probs) {
  if (probs.empty()) throw std::invalid_argument("aggregate_volume: no patch probabilities");
  const std::size_t n = probs.size();
  const std::size_t k = std::max<std::size_t>(1, (5 * n + 99) / 100);
  std::vector<double> v(probs.begin(), probs.end());
  std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end(), std::greater<>());
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += v[i];
  return s / static_cast<double>(k);
}

std::size_t select_model(std::span<const double> metrics, Criterion criterion) {
  if (metrics.empty()) throw std::invalid_argument("select_model: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < metrics.size(); ++i) {
    const bool better = criterion == Criterion::Minimize ? metrics[i] < metrics[best] : metrics[i] > metrics[best];
    if (better) best = i;
  }
  return best;
}

// ---- network ------------------------------------------------------------------------------

SEBlockImpl::SEBlockImpl(int c, int reduction) {
  fc1 = register_module("fc1", torch::nn::Linear(c, c / reduction));
  fc2 = register_module("fc2", torch::nn::Linear(c / reduction, c));
}

torch::Tensor SEBlockImpl::forward(const torch::Tensor& x) {
  const torch::Tensor s = torch::sigmoid(fc2(torch::relu(fc1(x.mean({2, 3})))));
  return x * s.unsqueeze(2).unsqueeze(3);
}

SEResBlockImpl::SEResBlockImpl(int in, int out, int stride) {
  conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  norm1 = register_module("norm1", torch::nn::GroupNorm(8, out));
  conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
  norm2 = register_module("norm2", torch::nn::GroupNorm(8, out));
  se = register_module("se", SEBlock(out));
  if (in != out || stride != 1) {
    skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
    skip_norm = register_module("skip_norm", torch::nn::GroupNorm(8, out));
  }
}

torch::Tensor SEResBlockImpl::forward(const torch::Tensor& x) {
  torch::Tensor h = torch::silu(norm1(conv1(x)));
  h = se(norm2(conv2(h)));
  return torch::silu(h + (skip.is_empty() ? x : skip_norm(skip(x))));
}

ClassifierNetImpl::ClassifierNetImpl(ClassifierInput in) : input(in) {
  torch::nn::Sequential s;
  s->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(2, 16, 3).stride(2).padding(1).bias(false)));
  s->push_back(torch::nn::GroupNorm(8, 16));
  s->push_back(torch::nn::SiLU());
  if (in == ClassifierInput::Patch) {
    s->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(16, 16, 3).stride(2).padding(1).bias(false)));
    s->push_back(torch::nn::GroupNorm(8, 16));
    s->push_back(torch::nn::SiLU());
  }
  stem = register_module("stem", s);
  torch::nn::ModuleList b;
  b->push_back(SEResBlock(16, 16, 1));
  b->push_back(SEResBlock(16, 16, 1));
  b->push_back(SEResBlock(16, 32, 2));
  b->push_back(SEResBlock(32, 32, 1));
  b->push_back(SEResBlock(32, 64, 2));
  b->push_back(SEResBlock(64, 64, 1));
  blocks = register_module("blocks", b);
  head = register_module("head", torch::nn::Linear(64, 1));
}

torch::Tensor ClassifierNetImpl::forward(const torch::Tensor& x) {
  const std::int64_t size = input == ClassifierInput::Patch ? 96 : 48;
  if (x.dim() != 4 || x.size(1) != 2 || x.size(2) != size || x.size(3) != size) {
    throw std::invalid_argument("classifier: expected [N, 2, " + std::to_string(size) + ", " + std::to_string(size) + "]");
  }
  torch::Tensor h = stem->forward(x);
  for (const auto& m : *blocks) h = m->as<SEResBlock>()->forward(h);
  return head(h.mean({2, 3})).squeeze(1);
}

// ---- training -----------------------------------------------------------------------------

TrainedClassifier train_classifier(const torch::Tensor& x, const std::vector<int>& y, ClassifierInput input,
                                   const ClassifierTrainConfig& config, std::uint64_t seed) {
  if (x.size(0) != static_cast<std::int64_t>(y.size())) throw std::invalid_argument("train_classifier: size mismatch");
  std::vector<std::int64_t> members[2];
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != 0 && y[i] != 1) throw std::invalid_argument("train_classifier: labels must be 0 or 1");
    members[y[i]].push_back(static_cast<std::int64_t>(i));
  }
  if (members[0].empty() || members[1].empty()) throw std::invalid_argument("train_classifier: both classes are needed");
  const torch::Tensor by_class[2] = {torch::tensor(members[0], torch::kLong), torch::tensor(members[1], torch::kLong)};
  const torch::Tensor targets = torch::tensor(std::vector<float>(y.begin(), y.end()), torch::kFloat);

  torch::manual_seed(substream_seed(seed, "classifier/init"));
  ClassifierNet net(input);
  TrainedClassifier out{ClassifierNet(input)};
  copy_parameters(*out.ema, *net);
  torch::optim::AdamW opt(net->parameters(), torch::optim::AdamWOptions(config.lr).weight_decay(config.weight_decay));
  at::Generator batch_gen = make_generator(seed, "classifier/batch");
  at::Generator aug_gen = make_generator(seed, "classifier/augment");
  at::Generator mix_gen = make_generator(seed, "classifier/mixup");
  const auto params = net->parameters();
  std::vector<torch::Tensor> ema_params = out.ema->parameters();
  const std::int64_t b = config.batch_size;
  net->train();
  for (int step = 0; step < config.steps; ++step) {
    const double lr = config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * step / config.steps));
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);

    torch::Tensor idx;
    if (config.balanced) {
      const torch::Tensor cls = torch::rand({b}, batch_gen, torch::kDouble) < 0.5;
      const torch::Tensor u = torch::rand({b}, batch_gen, torch::kDouble);
      const torch::Tensor pos = (u * static_cast<double>(members[1].size())).floor().to(torch::kLong);
      const torch::Tensor neg = (u * static_cast<double>(members[0].size())).floor().to(torch::kLong);
      idx = torch::where(cls, by_class[1].index_select(0, pos.clamp_max(static_cast<std::int64_t>(members[1].size()) - 1)),
                         by_class[0].index_select(0, neg.clamp_max(static_cast<std::int64_t>(members[0].size()) - 1)));
    } else {
      idx = torch::randint(x.size(0), {b}, batch_gen, torch::kLong);
    }
    torch::Tensor xb = x.index_select(0, idx);
    torch::Tensor yb = targets.index_select(0, idx);
    out.draws += b;
    out.positive_draws += yb.sum().item<std::int64_t>();
    if (config.augment) {
      std::vector<torch::Tensor> items;
      items.reserve(static_cast<std::size_t>(b));
      for (std::int64_t i = 0; i < b; ++i) items.push_back(augment(xb[i], aug_gen));
      xb = torch::stack(items);
    }
    if (config.mixup_alpha > 0.0) {
      const double lambda = draw_mixup_lambda(config.mixup_alpha, mix_gen);
      const torch::Tensor perm = torch::randperm(b, mix_gen, torch::kLong);
      Mixed m = mixup(xb, yb, xb.index_select(0, perm), yb.index_select(0, perm), lambda);
      xb = m.x;
      yb = m.y;
    }
    const torch::Tensor loss = F::binary_cross_entropy_with_logits(net->forward(xb), yb);
    opt.zero_grad();
    loss.backward();
    opt.step();
    ema_update(ema_params, params, ema_decay_at(config.ema_decay, step));
  }
  return out;
}

std::vector<double> predict(TrainedClassifier& c, const torch::Tensor& x, int batch_size) {
  torch::NoGradGuard guard;
  c.ema->eval();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(x.size(0)));
  for (std::int64_t i = 0; i < x.size(0); i += batch_size) {
    const torch::Tensor p = torch::sigmoid(c.ema->forward(x.slice(0, i, std::min<std::int64_t>(x.size(0), i + batch_size))))
                                .to(torch::kDouble);
    const auto a = p.accessor<double, 1>();
    for (std::int64_t j = 0; j < p.size(0); ++j) out.push_back(a[j]);
  }
  return out;
}

}  // namespace cmri

#include "cmri/cvae.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "cmri/error.hpp"
#include "cmri/metrics.hpp"
#include "cmri/patching.hpp"
#include "cmri/rng.hpp"
#include "cmri/tensor_io.hpp"

namespace cmri {

void CvaeLossWeights::validate() const {
  if (!(std::isfinite(lambda_grad) && lambda_grad >= 0 && std::isfinite(lambda_kl) && lambda_kl >= 0)) {
    throw std::invalid_argument("loss weights must be finite and non-negative");
  }
}

namespace {

torch::Tensor diff_rows(const torch::Tensor& x) { return x.slice(-2, 1) - x.slice(-2, 0, -1); }
torch::Tensor diff_cols(const torch::Tensor& x) { return x.slice(-1, 1) - x.slice(-1, 0, -1); }

}  // namespace

CvaeLoss cvae_loss(const torch::Tensor& recon, const torch::Tensor& target, const torch::Tensor& mu,
                   const torch::Tensor& logvar, const CvaeLossWeights& w) {
  w.validate();
  if (!recon.sizes().equals(target.sizes()) || !mu.sizes().equals(logvar.sizes())) {
    throw std::invalid_argument("cvae_loss: shape mismatch");
  }
  CvaeLoss l;
  l.recon = (recon - target).abs().mean();
  l.grad = 0.5 * ((diff_rows(recon) - diff_rows(target)).abs().mean() +
                  (diff_cols(recon) - diff_cols(target)).abs().mean());
  l.kl = (0.5 * (mu.square() + logvar.exp() - 1.0 - logvar)).mean();
  l.total = l.recon + w.lambda_grad * l.grad + w.lambda_kl * l.kl;
  return l;
}

CvaeLossGradients cvae_loss_gradients(const torch::Tensor& recon, const torch::Tensor& target,
                                      const torch::Tensor& mu, const torch::Tensor& logvar,
                                      const CvaeLossWeights& w) {
  w.validate();
  torch::NoGradGuard guard;
  CvaeLossGradients g;
  g.recon = torch::sign(recon - target) / static_cast<double>(recon.numel());

  const torch::Tensor er = diff_rows(recon) - diff_rows(target);
  const torch::Tensor sr = torch::sign(er) * (0.5 * w.lambda_grad / static_cast<double>(er.numel()));
  g.recon.slice(-2, 1) += sr;
  g.recon.slice(-2, 0, -1) -= sr;
  const torch::Tensor ec = diff_cols(recon) - diff_cols(target);
  const torch::Tensor sc = torch::sign(ec) * (0.5 * w.lambda_grad / static_cast<double>(ec.numel()));
  g.recon.slice(-1, 1) += sc;
  g.recon.slice(-1, 0, -1) -= sc;

  const double k = w.lambda_kl / static_cast<double>(mu.numel());
  g.mu = mu * k;
  g.logvar = 0.5 * (logvar.exp() - 1.0) * k;
  return g;
}

torch::Tensor film(const torch::Tensor& features, const torch::Tensor& scale, const torch::Tensor& shift) {
  const auto n = features.size(0), c = features.size(1);
  return features * scale.reshape({n, c, 1, 1}) + shift.reshape({n, c, 1, 1});
}

torch::Tensor reparameterize(const torch::Tensor& mu, const torch::Tensor& logvar, at::Generator& gen) {
  if (!mu.sizes().equals(logvar.sizes())) throw std::invalid_argument("reparameterize: shape mismatch");
  const torch::Tensor eps = torch::randn(mu.sizes(), gen, mu.options());
  return mu + torch::exp(0.5 * logvar) * eps;
}

namespace {

torch::nn::Conv2d conv(int in, int out, int k, int stride = 1, int pad = -1) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(pad < 0 ? k / 2 : pad));
}

void check_sequences(const torch::Tensor& seq, std::int64_t n) {
  if (seq.dim() != 1 || seq.size(0) != n) throw std::invalid_argument("sequence ids must be [N]");
  if (n > 0 && (seq.min().item<std::int64_t>() < 0 || seq.max().item<std::int64_t>() >= kSequenceCount)) {
    throw std::invalid_argument("unknown sequence id");
  }
}

}  // namespace

FilmResBlockImpl::FilmResBlockImpl(int c) : channels(c) {
  norm1 = register_module("norm1", torch::nn::GroupNorm(8, c));
  conv1 = register_module("conv1", conv(c, c, 3));
  norm2 = register_module("norm2", torch::nn::GroupNorm(8, c));
  conv2 = register_module("conv2", conv(c, c, 3));
  modulation = register_module("modulation", torch::nn::Embedding(kSequenceCount, 2 * c));
  torch::NoGradGuard guard;
  modulation->weight.zero_();
}

torch::Tensor FilmResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& seq) {
  torch::Tensor h = conv1(torch::silu(norm1(x)));
  const torch::Tensor m = modulation(seq);
  h = film(norm2(h), 1.0 + m.slice(1, 0, channels), m.slice(1, channels));
  h = conv2(torch::silu(h));
  return x + h;
}

CvaeNetImpl::CvaeNetImpl(int c, int res_blocks) {
  enc_in = register_module("enc_in", conv(2, c, 4, 2, 1));
  enc_blocks = register_module("enc_blocks", torch::nn::ModuleList());
  dec_blocks = register_module("dec_blocks", torch::nn::ModuleList());
  for (int i = 0; i < res_blocks; ++i) {
    enc_blocks->push_back(FilmResBlock(c));
    dec_blocks->push_back(FilmResBlock(c));
  }
  mu_head = register_module("mu_head", conv(c, kLatentChannels, 3));
  logvar_head = register_module("logvar_head", conv(c, kLatentChannels, 3));
  dec_in = register_module("dec_in", conv(kLatentChannels, c, 3));
  dec_out = register_module(
      "dec_out", torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(c, 2, 4).stride(2).padding(1)));
}

std::pair<torch::Tensor, torch::Tensor> CvaeNetImpl::encode(const torch::Tensor& x, const torch::Tensor& seq) {
  if (x.dim() != 4 || x.size(1) != 2 || x.size(2) != kPatchSize || x.size(3) != kPatchSize) {
    throw std::invalid_argument("encode: expected [N, 2, 96, 96]");
  }
  check_sequences(seq, x.size(0));
  torch::Tensor h = enc_in(x);
  for (auto& b : *enc_blocks) h = b->as<FilmResBlock>()->forward(h, seq);
  h = torch::silu(h);
  return {mu_head(h), logvar_head(h)};
}

torch::Tensor CvaeNetImpl::decode(const torch::Tensor& z, const torch::Tensor& seq) {
  if (z.dim() != 4 || z.size(1) != kLatentChannels || z.size(2) != kLatentSize || z.size(3) != kLatentSize) {
    throw std::invalid_argument("decode: expected [N, 2, 48, 48]");
  }
  check_sequences(seq, z.size(0));
  torch::Tensor h = dec_in(z);
  for (auto& b : *dec_blocks) h = b->as<FilmResBlock>()->forward(h, seq);
  return dec_out(torch::silu(h));
}

torch::Tensor LatentStats::standardize(const torch::Tensor& z) const {
  const auto m = torch::tensor({mean[0], mean[1]}, z.options()).reshape({1, 2, 1, 1});
  const auto s = torch::tensor({std[0], std[1]}, z.options()).reshape({1, 2, 1, 1});
  return (z - m) / s;
}

torch::Tensor LatentStats::destandardize(const torch::Tensor& z) const {
  const auto m = torch::tensor({mean[0], mean[1]}, z.options()).reshape({1, 2, 1, 1});
  const auto s = torch::tensor({std[0], std[1]}, z.options()).reshape({1, 2, 1, 1});
  return z * s + m;
}

LatentStats LatentStats::compute(const torch::Tensor& z) {
  LatentStats s;
  const torch::Tensor d = z.to(torch::kDouble);
  for (int c = 0; c < kLatentChannels; ++c) {
    const torch::Tensor ch = d.select(1, c);
    s.mean[static_cast<std::size_t>(c)] = ch.mean().item<double>();
    s.std[static_cast<std::size_t>(c)] = std::max(ch.std(/*unbiased=*/false).item<double>(), 1e-8);
  }
  return s;
}

CvaeModel::CvaeModel(const CvaeConfig& c) : config(c), net(c.channels, c.res_blocks) {}

void CvaeModel::save(const fs::path& path) const {
  Container c;
  c.meta["kind"] = "cvae";
  c.meta["config"] = {{"channels", config.channels},       {"res_blocks", config.res_blocks},
                      {"lambda_grad", config.lambda_grad}, {"lambda_kl", config.lambda_kl},
                      {"lr", config.lr},                   {"batch_size", config.batch_size},
                      {"epochs", config.epochs}};
  c.meta["latent_mean"] = stats.mean;
  c.meta["latent_std"] = stats.std;
  c.meta["best_epoch"] = best_epoch;
  json rows = json::array();
  for (const auto& r : log) {
    rows.push_back({{"epoch", r.epoch}, {"step", r.step}, {"train_total", r.train_total},
                    {"train_recon", r.train_recon}, {"val_total", r.val_total}});
  }
  c.meta["log"] = rows;
  store_module(c, "net.", *net);
  write_container(path, kCheckpointMagic, c);
}

CvaeModel CvaeModel::load(const fs::path& path) {
  const Container c = read_container(path, kCheckpointMagic);
  if (c.meta.value("kind", "") != "cvae") throw ValidationError("not an autoencoder checkpoint: " + path.string());
  CvaeConfig cfg;
  const json& j = c.meta.at("config");
  cfg.channels = j.at("channels").get<int>();
  cfg.res_blocks = j.at("res_blocks").get<int>();
  cfg.lambda_grad = j.at("lambda_grad").get<double>();
  cfg.lambda_kl = j.at("lambda_kl").get<double>();
  cfg.lr = j.at("lr").get<double>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.epochs = j.at("epochs").get<int>();
  CvaeModel m(cfg);
  m.stats.mean = c.meta.at("latent_mean").get<std::array<double, 2>>();
  m.stats.std = c.meta.at("latent_std").get<std::array<double, 2>>();
  m.best_epoch = c.meta.value("best_epoch", 0);
  for (const auto& r : c.meta.at("log")) {
    m.log.push_back({r.at("epoch").get<int>(), r.at("step").get<int>(), r.at("train_total").get<double>(),
                     r.at("train_recon").get<double>(), r.at("val_total").get<double>()});
  }
  restore_module(c, "net.", *m.net);
  return m;
}

torch::Tensor CvaeModel::encode_mean(const torch::Tensor& patches, const torch::Tensor& seq) {
  torch::NoGradGuard guard;
  net->eval();
  return net->encode(patches, seq).first;
}

torch::Tensor CvaeModel::decode(const torch::Tensor& latents, const torch::Tensor& seq) {
  torch::NoGradGuard guard;
  net->eval();
  return net->decode(latents, seq);
}

namespace {

std::vector<ConditionLabel> conditions_of(const RecordSet& set, std::span<const std::size_t> idx) {
  std::vector<ConditionLabel> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(set.meta[i].condition);
  return out;
}

std::vector<std::size_t> range_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

}  // namespace

double validation_loss(CvaeModel& model, const RecordSet& patches, const CvaeLossWeights& w, int batch_size) {
  if (patches.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  torch::NoGradGuard guard;
  model.net->eval();
  double total = 0.0;
  for (std::size_t b = 0; b < patches.size(); b += static_cast<std::size_t>(batch_size)) {
    const auto idx = range_indices(b, std::min(patches.size(), b + static_cast<std::size_t>(batch_size)));
    const torch::Tensor x = stack_records(patches, idx);
    const torch::Tensor seq = sequence_ids(conditions_of(patches, idx));
    auto [mu, logvar] = model.net->encode(x, seq);
    const CvaeLoss l = cvae_loss(model.net->decode(mu, seq), x, mu, logvar, w);
    total += l.total.item<double>() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(patches.size());
}

CvaeModel train_cvae(const RecordSet& train, const RecordSet& val, const CvaeConfig& config,
                     std::uint64_t seed, const ProgressFn& progress) {
  if (train.size() == 0) throw std::invalid_argument("train_cvae: empty training set");
  torch::manual_seed(substream_seed(seed, "cvae/init"));
  CvaeModel model(config);
  const CvaeLossWeights w{config.lambda_grad, config.lambda_kl};
  torch::optim::Adam opt(model.net->parameters(), torch::optim::AdamOptions(config.lr));
  at::Generator shuffle_gen = make_generator(seed, "cvae/shuffle");
  at::Generator noise_gen = make_generator(seed, "cvae/noise");

  double best_val = std::numeric_limits<double>::infinity();
  std::vector<torch::Tensor> best_weights;
  int step = 0;
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    model.net->train();
    const torch::Tensor perm = torch::randperm(static_cast<std::int64_t>(train.size()), shuffle_gen, torch::kLong);
    const auto* p = perm.data_ptr<std::int64_t>();
    double sum_total = 0.0, sum_recon = 0.0;
    int batches = 0;
    for (std::size_t b = 0; b < train.size(); b += batch) {
      std::vector<std::size_t> idx;
      for (std::size_t i = b; i < std::min(train.size(), b + batch); ++i) idx.push_back(static_cast<std::size_t>(p[i]));
      const torch::Tensor x = stack_records(train, idx);
      const torch::Tensor seq = sequence_ids(conditions_of(train, idx));
      auto [mu, logvar] = model.net->encode(x, seq);
      const torch::Tensor z = reparameterize(mu, logvar, noise_gen);
      const CvaeLoss l = cvae_loss(model.net->decode(z, seq), x, mu, logvar, w);
      opt.zero_grad();
      l.total.backward();
      opt.step();
      sum_total += l.total.item<double>();
      sum_recon += l.recon.item<double>();
      ++batches;
      ++step;
    }
    const double v = val.size() > 0 ? validation_loss(model, val, w) : sum_total / batches;
    model.log.push_back({epoch, step, sum_total / batches, sum_recon / batches, v});
    if (progress) {
      progress("epoch " + std::to_string(epoch) + " train " + std::to_string(sum_total / batches) +
               " val " + std::to_string(v));
    }
    if (v < best_val) {
      best_val = v;
      model.best_epoch = epoch;
      best_weights.clear();
      for (const auto& t : model.net->parameters()) best_weights.push_back(t.detach().clone());
    }
  }
  {
    torch::NoGradGuard guard;
    auto params = model.net->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(best_weights[i]);
  }
  const RecordSet latents = encode_records(model, train);
  model.stats = LatentStats::compute(stack_records(latents));
  return model;
}

RecordSet encode_records(CvaeModel& model, const RecordSet& patches, int batch_size) {
  RecordSet out;
  out.shape = {kLatentChannels, kLatentSize, kLatentSize};
  out.values.reserve(patches.size() * kLatentValues);
  for (std::size_t b = 0; b < patches.size(); b += static_cast<std::size_t>(batch_size)) {
    const auto idx = range_indices(b, std::min(patches.size(), b + static_cast<std::size_t>(batch_size)));
    const torch::Tensor mu =
        model.encode_mean(stack_records(patches, idx), sequence_ids(conditions_of(patches, idx)));
    const std::vector<float> v = to_vector(mu);
    out.values.insert(out.values.end(), v.begin(), v.end());
    for (auto i : idx) out.meta.push_back(patches.meta[i]);
  }
  return out;
}

ReconstructionQuality reconstruction_quality(CvaeModel& model, const RecordSet& patches, int batch_size) {
  ReconstructionQuality q;
  for (std::size_t b = 0; b < patches.size(); b += static_cast<std::size_t>(batch_size)) {
    const auto idx = range_indices(b, std::min(patches.size(), b + static_cast<std::size_t>(batch_size)));
    const torch::Tensor x = stack_records(patches, idx);
    const torch::Tensor seq = sequence_ids(conditions_of(patches, idx));
    const torch::Tensor recon = model.decode(model.encode_mean(x, seq), seq);
    for (std::int64_t i = 0; i < x.size(0); ++i) {
      const ComplexField want = to_field(x[i]);
      const ComplexField got = to_field(recon[i]);
      q.coherence += phase_coherence(got, want);
      const RealImage mg = magnitude(got), mw = magnitude(want);
      q.ssim += ssim(mg, mw);
      q.psnr += std::min(psnr(mg, mw), 100.0);
      ++q.count;
    }
  }
  if (q.count > 0) {
    q.coherence /= static_cast<double>(q.count);
    q.ssim /= static_cast<double>(q.count);
    q.psnr /= static_cast<double>(q.count);
  }
  return q;
}

}  // namespace cmri

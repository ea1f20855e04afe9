#include "cmri/flowmatch.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "cmri/error.hpp"
#include "cmri/rng.hpp"
#include "cmri/tensor_io.hpp"

namespace cmri {

namespace F = torch::nn::functional;

torch::Tensor interpolate(const torch::Tensor& x0, const torch::Tensor& eps, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interpolate: t must lie in [0, 1]");
  if (!x0.sizes().equals(eps.sizes())) throw std::invalid_argument("interpolate: shape mismatch");
  return (1.0 - t) * eps + t * x0;
}

torch::Tensor interpolate(const torch::Tensor& x0, const torch::Tensor& eps, const torch::Tensor& t) {
  if (!x0.sizes().equals(eps.sizes())) throw std::invalid_argument("interpolate: shape mismatch");
  if (t.dim() != 1 || t.size(0) != x0.size(0)) throw std::invalid_argument("interpolate: t must be [N]");
  if (t.numel() > 0 && (t.min().item<double>() < 0.0 || t.max().item<double>() > 1.0)) {
    throw std::invalid_argument("interpolate: t must lie in [0, 1]");
  }
  std::vector<std::int64_t> shape(static_cast<std::size_t>(x0.dim()), 1);
  shape[0] = x0.size(0);
  const torch::Tensor tt = t.reshape(shape).to(x0.dtype());
  return (1.0 - tt) * eps + tt * x0;
}

torch::Tensor fm_loss(const torch::Tensor& v_pred, const torch::Tensor& x0, const torch::Tensor& eps) {
  if (!v_pred.sizes().equals(x0.sizes()) || !x0.sizes().equals(eps.sizes())) {
    throw std::invalid_argument("fm_loss: shape mismatch");
  }
  return (v_pred - (x0 - eps)).square().mean();
}

torch::Tensor fm_loss_gradient(const torch::Tensor& v_pred, const torch::Tensor& x0, const torch::Tensor& eps) {
  torch::NoGradGuard guard;
  return 2.0 * (v_pred - (x0 - eps)) / static_cast<double>(v_pred.numel());
}

torch::Tensor cfg_combine(const torch::Tensor& v_uncond, const torch::Tensor& v_cond, double w) {
  if (!(w >= 1.0)) throw std::invalid_argument("cfg_combine: guidance scale must be >= 1");
  if (!v_uncond.sizes().equals(v_cond.sizes())) throw std::invalid_argument("cfg_combine: shape mismatch");
  if (w == 1.0) return v_cond;
  return v_uncond + w * (v_cond - v_uncond);
}

void ema_update(std::vector<torch::Tensor>& ema, const std::vector<torch::Tensor>& online, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw std::invalid_argument("ema_update: decay must be in [0, 1]");
  if (ema.size() != online.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < ema.size(); ++i) {
    if (!ema[i].sizes().equals(online[i].sizes())) throw std::invalid_argument("ema_update: shape mismatch");
  }
  for (std::size_t i = 0; i < ema.size(); ++i) {
    if (decay == 1.0) continue;
    if (decay == 0.0) {
      ema[i].copy_(online[i]);
      continue;
    }
    ema[i].mul_(decay).add_(online[i].detach(), 1.0 - decay);
  }
}

double ema_decay_at(double decay, long step) {
  return std::min(decay, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
}

// ---- network ----------------------------------------------------------------

torch::Tensor time_features(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  const torch::Tensor i = torch::arange(half, torch::kFloat);
  const torch::Tensor freqs = torch::exp(-std::log(10000.0) * i / half);
  const torch::Tensor args = (1000.0 * t.to(torch::kFloat)).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

namespace {

torch::nn::Conv2d conv(int in, int out, int k, int stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

torch::Tensor upsample(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
}

}  // namespace

CondResBlockImpl::CondResBlockImpl(int in, int out, int cond_dim) : out_channels(out) {
  norm1 = register_module("norm1", torch::nn::GroupNorm(8, in));
  conv1 = register_module("conv1", conv(in, out, 3));
  norm2 = register_module("norm2", torch::nn::GroupNorm(8, out));
  conv2 = register_module("conv2", conv(out, out, 3));
  cond_proj = register_module("cond_proj", torch::nn::Linear(cond_dim, 2 * out));
  if (in != out) skip = register_module("skip", conv(in, out, 1));
}

torch::Tensor CondResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& cond) {
  torch::Tensor h = conv1(torch::silu(norm1(x)));
  const torch::Tensor m = cond_proj(torch::silu(cond));
  const auto n = h.size(0);
  const torch::Tensor scale = m.slice(1, 0, out_channels).reshape({n, out_channels, 1, 1});
  const torch::Tensor shift = m.slice(1, out_channels).reshape({n, out_channels, 1, 1});
  h = norm2(h) * (1.0 + scale) + shift;
  h = conv2(torch::silu(h));
  return (skip.is_empty() ? x : skip(x)) + h;
}

SelfAttentionImpl::SelfAttentionImpl(int c) {
  norm = register_module("norm", torch::nn::GroupNorm(8, c));
  qkv = register_module("qkv", conv(c, 3 * c, 1));
  proj = register_module("proj", conv(c, c, 1));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
  const auto n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  const auto parts = qkv(norm(x)).reshape({n, 3, c, hw}).unbind(1);
  const torch::Tensor q = parts[0].transpose(1, 2);  // [n, hw, c]
  const torch::Tensor k = parts[1];                  // [n, c, hw]
  const torch::Tensor v = parts[2].transpose(1, 2);
  const torch::Tensor attn = torch::softmax(torch::bmm(q, k) / std::sqrt(static_cast<double>(c)), -1);
  const torch::Tensor out = torch::bmm(attn, v).transpose(1, 2).reshape(x.sizes());
  return x + proj(out);
}

VelocityNetImpl::VelocityNetImpl(int c) : base_channels(c), cond_dim(4 * c) {
  time_mlp = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(64, cond_dim), torch::nn::SiLU(),
                                                                 torch::nn::Linear(cond_dim, cond_dim)));
  seq_embed = register_module("seq_embed", torch::nn::Embedding(kSequenceCount + 1, cond_dim));
  in_conv = register_module("in_conv", conv(kLatentChannels, c, 3));
  d1 = register_module("d1", CondResBlock(c, c, cond_dim));
  down1 = register_module("down1", conv(c, c, 3, 2));
  d2 = register_module("d2", CondResBlock(c, 2 * c, cond_dim));
  down2 = register_module("down2", conv(2 * c, 2 * c, 3, 2));
  d3 = register_module("d3", CondResBlock(2 * c, 2 * c, cond_dim));
  a3 = register_module("a3", SelfAttention(2 * c));
  m1 = register_module("m1", CondResBlock(2 * c, 2 * c, cond_dim));
  am = register_module("am", SelfAttention(2 * c));
  m2 = register_module("m2", CondResBlock(2 * c, 2 * c, cond_dim));
  u3 = register_module("u3", CondResBlock(4 * c, 2 * c, cond_dim));
  au3 = register_module("au3", SelfAttention(2 * c));
  up2 = register_module("up2", conv(2 * c, 2 * c, 3));
  u2 = register_module("u2", CondResBlock(4 * c, 2 * c, cond_dim));
  up1 = register_module("up1", conv(2 * c, c, 3));
  u1 = register_module("u1", CondResBlock(2 * c, c, cond_dim));
  out_norm = register_module("out_norm", torch::nn::GroupNorm(8, c));
  out_conv = register_module("out_conv", conv(c, kLatentChannels, 3));
}

void VelocityNetImpl::enable_path_conditioning() {
  if (has_path_conditioning()) return;
  path_embed = register_module("path_embed", torch::nn::Embedding(kAbnormalityTokens, cond_dim));
  torch::NoGradGuard guard;
  path_embed->weight.zero_();
}

torch::Tensor VelocityNetImpl::forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& seq,
                                       const torch::Tensor& path) {
  const auto n = x.size(0);
  if (x.dim() != 4 || x.size(1) != kLatentChannels) throw std::invalid_argument("velocity net: expected [N, 2, H, W]");
  if (t.size(0) != n || seq.size(0) != n || path.size(0) != n) {
    throw std::invalid_argument("velocity net: batch size mismatch");
  }
  if (n > 0) {
    if (seq.min().item<std::int64_t>() < 0 || seq.max().item<std::int64_t>() > kNullSequence) {
      throw std::invalid_argument("unknown sequence token");
    }
    if (path.min().item<std::int64_t>() < 0 || path.max().item<std::int64_t>() > kNullAbnormality) {
      throw std::invalid_argument("unknown abnormality token");
    }
  }
  torch::Tensor cond = time_mlp->forward(time_features(t, 64)) + seq_embed(seq);
  if (has_path_conditioning()) {
    cond = cond + path_embed(path);
  } else if (n > 0 && path.min().item<std::int64_t>() != kNullAbnormality) {
    throw std::invalid_argument("abnormality conditioning is not enabled on this network");
  }

  const torch::Tensor s1 = d1(in_conv(x), cond);
  const torch::Tensor s2 = d2(down1(s1), cond);
  const torch::Tensor s3 = a3(d3(down2(s2), cond));
  torch::Tensor h = m2(am(m1(s3, cond)), cond);
  h = au3(u3(torch::cat({h, s3}, 1), cond));
  h = u2(torch::cat({up2(upsample(h)), s2}, 1), cond);
  h = u1(torch::cat({up1(upsample(h)), s1}, 1), cond);
  return out_conv(torch::silu(out_norm(h)));
}

// ---- model container ----------------------------------------------------------

std::string_view to_string(FlowStage s) { return s == FlowStage::Stage1 ? "stage1" : "stage2"; }

FlowModel::FlowModel(int c, double decay)
    : base_channels(c), ema_decay(decay), online(VelocityNet(c)), ema(VelocityNet(c)) {
  copy_parameters(*ema, *online);
}

void FlowModel::save(const fs::path& path) const {
  Container c;
  c.meta["kind"] = "flow";
  c.meta["stage"] = std::string(to_string(stage));
  c.meta["base_channels"] = base_channels;
  c.meta["ema_decay"] = ema_decay;
  c.meta["path_conditioning"] = online->has_path_conditioning();
  c.meta["latent_mean"] = stats.mean;
  c.meta["latent_std"] = stats.std;
  c.meta["sampler"] = {{"n_steps", sampler.n_steps}, {"w_stage1", sampler.w_stage1},
                       {"w_stage2", sampler.w_stage2}, {"batch_size", sampler.batch_size}};
  json vocab = json::object();
  vocab["sequence"] = json::array();
  for (int s = 0; s <= kSequenceCount; ++s) vocab["sequence"].push_back(std::string(to_string(static_cast<Sequence>(s))));
  vocab["abnormality"] = json::array();
  for (int a = 0; a < kAbnormalityTokens; ++a) {
    vocab["abnormality"].push_back(std::string(to_string(static_cast<Abnormality>(a))));
  }
  c.meta["vocabulary"] = vocab;
  c.meta["log"] = log;
  store_module(c, "online.", *online);
  store_module(c, "ema.", *ema);
  write_container(path, kCheckpointMagic, c);
}

FlowModel FlowModel::load(const fs::path& path) {
  const Container c = read_container(path, kCheckpointMagic);
  if (c.meta.value("kind", "") != "flow") throw ValidationError("not a flow checkpoint: " + path.string());
  FlowModel m(c.meta.at("base_channels").get<int>(), c.meta.at("ema_decay").get<double>());
  m.stage = c.meta.at("stage").get<std::string>() == "stage2" ? FlowStage::Stage2 : FlowStage::Stage1;
  if (c.meta.at("path_conditioning").get<bool>()) {
    m.online->enable_path_conditioning();
    m.ema->enable_path_conditioning();
  }
  m.stats.mean = c.meta.at("latent_mean").get<std::array<double, 2>>();
  m.stats.std = c.meta.at("latent_std").get<std::array<double, 2>>();
  const json& s = c.meta.at("sampler");
  m.sampler.n_steps = s.at("n_steps").get<int>();
  m.sampler.w_stage1 = s.at("w_stage1").get<double>();
  m.sampler.w_stage2 = s.at("w_stage2").get<double>();
  m.sampler.batch_size = s.at("batch_size").get<int>();
  m.log = c.meta.value("log", json::array());
  restore_module(c, "online.", *m.online);
  restore_module(c, "ema.", *m.ema);
  return m;
}

namespace {

FlowModel clone_model(const FlowModel& src) {
  FlowModel m(src.base_channels, src.ema_decay);
  m.stage = src.stage;
  if (src.online->has_path_conditioning()) {
    m.online->enable_path_conditioning();
    m.ema->enable_path_conditioning();
  }
  copy_parameters(*m.online, *src.online);
  copy_parameters(*m.ema, *src.ema);
  m.stats = src.stats;
  m.sampler = src.sampler;
  m.log = src.log;
  return m;
}

torch::Tensor ids(const std::vector<ConditionLabel>& cond, bool sequence) {
  return sequence ? sequence_ids(cond) : abnormality_ids(cond);
}

}  // namespace

ConditionLabel unconditional_label(FlowStage stage, const ConditionLabel& cond) {
  if (stage == FlowStage::Stage1) return {Sequence::Null, Abnormality::Null};
  return {cond.sequence, Abnormality::Null};
}

torch::Tensor guided_velocity(VelocityNet& net, FlowStage stage, const torch::Tensor& x, double t,
                              const std::vector<ConditionLabel>& cond, double w) {
  const auto n = x.size(0);
  std::vector<ConditionLabel> c = cond;
  if (stage == FlowStage::Stage1) {
    for (auto& l : c) l.abnormality = Abnormality::Null;
  }
  if (w == 1.0) {
    return net->forward(x, torch::full({n}, t, torch::kFloat), ids(c, true), ids(c, false));
  }
  if (!(w > 1.0)) throw std::invalid_argument("guidance scale must be >= 1");
  std::vector<ConditionLabel> both = c;
  for (const auto& l : c) both.push_back(unconditional_label(stage, l));
  const torch::Tensor v = net->forward(torch::cat({x, x}, 0), torch::full({2 * n}, t, torch::kFloat),
                                       ids(both, true), ids(both, false));
  return cfg_combine(v.slice(0, n), v.slice(0, 0, n), w);
}

torch::Tensor heun_sample(FlowModel& model, const std::vector<ConditionLabel>& cond, double w, int n_steps,
                          at::Generator& gen) {
  torch::NoGradGuard guard;
  model.ema->eval();
  const auto n = static_cast<std::int64_t>(cond.size());
  const torch::Tensor eps = torch::randn({n, kLatentChannels, kLatentSize, kLatentSize}, gen, torch::kFloat);
  const torch::Tensor x = heun_integrate(
      eps, [&](const torch::Tensor& xt, double t) { return guided_velocity(model.ema, model.stage, xt, t, cond, w); },
      n_steps);
  return model.stats.destandardize(x);
}

// ---- training ---------------------------------------------------------------------

namespace {

struct TrainBatch {
  torch::Tensor x0, seq, path;
};

// The loss of one batch; t and eps are drawn from gen.
torch::Tensor flow_step_loss(VelocityNet& net, const TrainBatch& b, at::Generator& gen) {
  const auto n = b.x0.size(0);
  const torch::Tensor t = torch::rand({n}, gen, torch::kFloat);
  const torch::Tensor eps = torch::randn(b.x0.sizes(), gen, torch::kFloat);
  const torch::Tensor xt = interpolate(b.x0, eps, t);
  return fm_loss(net->forward(xt, t, b.seq, b.path), b.x0, eps);
}


void ema_step(FlowModel& m, long step) {
  auto online = m.online->named_parameters();
  auto ema = m.ema->named_parameters();
  std::vector<torch::Tensor> src, dst;
  for (const auto& p : online) {
    if (!p.value().requires_grad()) continue;
    src.push_back(p.value());
    dst.push_back(ema[p.key()]);
  }
  ema_update(dst, src, ema_decay_at(m.ema_decay, step));
}

}  // namespace

Stage1Result train_stage1(const RecordSet& latents, const LatentStats& stats, const FlowConfig& config,
                          std::uint64_t seed, const ProgressFn& progress) {
  if (latents.size() == 0) throw std::invalid_argument("train_stage1: no latents");
  std::set<Sequence> present;
  for (const auto& m : latents.meta) present.insert(m.condition.sequence);
  if (present.size() < static_cast<std::size_t>(kSequenceCount) && progress) {
    progress("warning: latents cover only " + std::to_string(present.size()) + " of 5 sequences");
  }

  torch::manual_seed(substream_seed(seed, "flow/stage1/init"));
  Stage1Result res{FlowModel(config.base_channels, config.ema_decay), {}, 0, 0};
  FlowModel& model = res.model;
  model.stats = stats;
  const torch::Tensor data = stats.standardize(stack_records(latents));
  std::vector<ConditionLabel> labels;
  for (const auto& m : latents.meta) labels.push_back({m.condition.sequence, Abnormality::Null});
  const torch::Tensor all_seq = sequence_ids(labels);

  torch::optim::Adam opt(model.online->parameters(), torch::optim::AdamOptions(config.lr));
  at::Generator batch_gen = make_generator(seed, "flow/stage1/batch");
  at::Generator noise_gen = make_generator(seed, "flow/stage1/noise");
  at::Generator drop_gen = make_generator(seed, "flow/stage1/dropout");
  const auto m = static_cast<std::int64_t>(latents.size());
  double running = 0.0;
  int running_n = 0;
  int next_snapshot = 1;
  model.online->train();
  for (int step = 1; step <= config.stage1_steps; ++step) {
    const torch::Tensor idx = torch::randint(m, {config.batch_size}, batch_gen, torch::kLong);
    const torch::Tensor drop = torch::rand({config.batch_size}, drop_gen, torch::kFloat) < config.cond_dropout;
    res.condition_draws += config.batch_size;
    res.dropped_conditions += drop.sum().item<std::int64_t>();
    TrainBatch b;
    b.x0 = data.index_select(0, idx);
    b.seq = torch::where(drop, torch::full_like(idx, kNullSequence), all_seq.index_select(0, idx));
    b.path = torch::full_like(idx, kNullAbnormality);
    const torch::Tensor loss = flow_step_loss(model.online, b, noise_gen);
    opt.zero_grad();
    loss.backward();
    opt.step();
    ema_step(model, step);
    running += loss.item<double>();
    ++running_n;
    if (step % 50 == 0 || step == config.stage1_steps) {
      model.log.push_back({{"stage", "stage1"}, {"step", step}, {"loss", running / running_n}});
      if (progress) progress("stage1 step " + std::to_string(step) + " loss " + std::to_string(running / running_n));
      running = 0.0;
      running_n = 0;
    }
    const long due = static_cast<long>(config.stage1_steps) * next_snapshot / config.snapshots;
    if (step == due) {
      res.snapshots.push_back(clone_model(model));
      ++next_snapshot;
    }
  }
  model.log.push_back({{"stage", "stage1"}, {"condition_draws", res.condition_draws},
                       {"dropped_conditions", res.dropped_conditions}});
  return res;
}

BalancedSampler::BalancedSampler(const std::vector<ConditionLabel>& labels) {
  std::map<std::pair<int, int>, std::vector<std::size_t>> by_group;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_group[{static_cast<int>(labels[i].sequence), static_cast<int>(labels[i].abnormality)}].push_back(i);
  }
  for (auto& [key, members] : by_group) groups_.push_back(std::move(members));
  if (groups_.empty()) throw std::invalid_argument("BalancedSampler: no samples");
}

std::size_t BalancedSampler::draw(at::Generator& gen) const {
  const auto g = torch::randint(static_cast<std::int64_t>(groups_.size()), {1}, gen, torch::kLong).item<std::int64_t>();
  const auto& members = groups_[static_cast<std::size_t>(g)];
  const auto i = torch::randint(static_cast<std::int64_t>(members.size()), {1}, gen, torch::kLong).item<std::int64_t>();
  return members[static_cast<std::size_t>(i)];
}

bool is_new_stage2_parameter(const std::string& name) { return name.rfind("path_embed", 0) == 0; }

Stage2Result train_stage2(const RecordSet& latents, const FlowModel& stage1, const FlowConfig& config,
                          std::uint64_t seed, const ProgressFn& progress) {
  if (stage1.stage != FlowStage::Stage1 || stage1.online->has_path_conditioning()) {
    throw ValidationError("stage-2 finetuning needs a stage-1 checkpoint");
  }
  if (latents.size() == 0) throw std::invalid_argument("train_stage2: no latents");

  Stage2Result res{FlowModel(stage1.base_channels, config.ema_decay), 0, 0, 0, 0};
  FlowModel& model = res.model;
  model.stage = FlowStage::Stage2;
  model.stats = stage1.stats;
  model.sampler = stage1.sampler;
  model.log = stage1.log;
  copy_parameters(*model.online, *stage1.ema);
  copy_parameters(*model.ema, *stage1.ema);
  torch::manual_seed(substream_seed(seed, "flow/stage2/init"));
  model.online->enable_path_conditioning();
  model.ema->enable_path_conditioning();

  const torch::Tensor data = model.stats.standardize(stack_records(latents));
  std::vector<ConditionLabel> labels;
  for (const auto& m : latents.meta) labels.push_back(m.condition);
  const BalancedSampler sampler(labels);
  const torch::Tensor all_seq = sequence_ids(labels);
  const torch::Tensor all_path = abnormality_ids(labels);

  std::vector<torch::Tensor> new_params, old_params;
  for (auto& p : model.online->named_parameters()) {
    (is_new_stage2_parameter(p.key()) ? new_params : old_params).push_back(p.value());
  }

  at::Generator batch_gen = make_generator(seed, "flow/stage2/batch");
  at::Generator noise_gen = make_generator(seed, "flow/stage2/noise");
  at::Generator drop_gen = make_generator(seed, "flow/stage2/dropout");
  long step = 0;
  auto run_phase = [&](const char* name, int steps, torch::optim::Optimizer& opt) {
    double running = 0.0;
    int running_n = 0;
    model.online->train();
    for (int i = 1; i <= steps; ++i) {
      std::vector<std::int64_t> picks(static_cast<std::size_t>(config.batch_size));
      for (auto& p : picks) {
        p = static_cast<std::int64_t>(sampler.draw(batch_gen));
        const Abnormality a = labels[static_cast<std::size_t>(p)].abnormality;
        if (a == Abnormality::Normal || a == Abnormality::Abnormal) {
          ++res.labeled_draws;
          res.abnormal_draws += a == Abnormality::Abnormal;
        }
      }
      const torch::Tensor idx = torch::tensor(picks, torch::kLong);
      const torch::Tensor drop = torch::rand({config.batch_size}, drop_gen, torch::kFloat) < config.stage2_cond_dropout;
      res.condition_draws += config.batch_size;
      res.dropped_conditions += drop.sum().item<std::int64_t>();
      TrainBatch b;
      b.x0 = data.index_select(0, idx);
      b.seq = all_seq.index_select(0, idx);
      b.path = torch::where(drop, torch::full_like(idx, kNullAbnormality), all_path.index_select(0, idx));
      const torch::Tensor loss = flow_step_loss(model.online, b, noise_gen);
      opt.zero_grad();
      loss.backward();
      opt.step();
      ema_step(model, ++step);
      running += loss.item<double>();
      ++running_n;
      if (i % 50 == 0 || i == steps) {
        model.log.push_back({{"stage", name}, {"step", i}, {"loss", running / running_n}});
        if (progress) progress(std::string(name) + " step " + std::to_string(i) + " loss " + std::to_string(running / running_n));
        running = 0.0;
        running_n = 0;
      }
    }
  };

  // Phase A: only the new embedding learns.
  for (auto& p : old_params) p.set_requires_grad(false);
  {
    torch::optim::Adam opt(new_params, torch::optim::AdamOptions(config.stage2_lr));
    run_phase("stage2/phase_a", config.stage2_phase_a_steps, opt);
  }
  // Phase B: everything, pretrained weights at a reduced rate.
  for (auto& p : old_params) p.set_requires_grad(true);
  {
    std::vector<torch::optim::OptimizerParamGroup> groups;
    groups.emplace_back(new_params, std::make_unique<torch::optim::AdamOptions>(config.stage2_lr));
    groups.emplace_back(old_params,
                        std::make_unique<torch::optim::AdamOptions>(config.stage2_lr * config.pretrained_lr_ratio));
    torch::optim::Adam opt(std::move(groups), torch::optim::AdamOptions(config.stage2_lr));
    run_phase("stage2/phase_b", config.stage2_phase_b_steps, opt);
  }
  model.log.push_back({{"stage", "stage2"}, {"labeled_draws", res.labeled_draws},
                       {"abnormal_draws", res.abnormal_draws}, {"condition_draws", res.condition_draws},
                       {"dropped_conditions", res.dropped_conditions}});
  return res;
}

double flow_validation_loss(VelocityNet& net, const RecordSet& latents, const LatentStats& stats, bool use_path,
                            std::uint64_t seed, int batch_size) {
  if (latents.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  torch::NoGradGuard guard;
  net->eval();
  at::Generator gen = make_generator(seed, "flow/validation");
  const torch::Tensor data = stats.standardize(stack_records(latents));
  std::vector<ConditionLabel> labels;
  for (const auto& m : latents.meta) {
    labels.push_back({m.condition.sequence, use_path ? m.condition.abnormality : Abnormality::Null});
  }
  const torch::Tensor seq = sequence_ids(labels);
  const torch::Tensor path = abnormality_ids(labels);
  double total = 0.0;
  const auto n = static_cast<std::int64_t>(latents.size());
  for (std::int64_t b = 0; b < n; b += batch_size) {
    const auto e = std::min<std::int64_t>(n, b + batch_size);
    TrainBatch tb{data.slice(0, b, e), seq.slice(0, b, e), path.slice(0, b, e)};
    total += flow_step_loss(net, tb, gen).item<double>() * static_cast<double>(e - b);
  }
  return total / static_cast<double>(n);
}

}  // namespace cmri

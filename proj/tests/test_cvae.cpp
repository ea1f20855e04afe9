#include <gtest/gtest.h>

#include <filesystem>

#include "cmri/cvae.hpp"
#include "cmri/error.hpp"
#include "nn_fixtures.hpp"

using namespace cmri;
using cmri::testing::max_abs;

namespace {

torch::Tensor zeros4(std::int64_t n = 2) { return torch::zeros({n, 2, 6, 6}, torch::kDouble); }

double total_of(const torch::Tensor& r, const torch::Tensor& x, const torch::Tensor& mu, const torch::Tensor& lv,
                const CvaeLossWeights& w) {
  return cvae_loss(r, x, mu, lv, w).total.item<double>();
}

// Central differences of the total loss with respect to every element of which.
torch::Tensor numeric_gradient(torch::Tensor r, torch::Tensor x, torch::Tensor mu, torch::Tensor lv,
                               const CvaeLossWeights& w, int which) {
  torch::Tensor& v = which == 0 ? r : which == 1 ? mu : lv;
  torch::Tensor g = torch::zeros_like(v);
  auto flat = v.view(-1);
  auto gf = g.view(-1);
  const double h = 1e-6;
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    const double keep = flat[i].item<double>();
    flat[i] = keep + h;
    const double up = total_of(r, x, mu, lv, w);
    flat[i] = keep - h;
    const double down = total_of(r, x, mu, lv, w);
    flat[i] = keep;
    gf[i] = (up - down) / (2 * h);
  }
  return g;
}

}  // namespace

TEST(CvaeLoss, AllZeroInputsGiveZero) {
  const auto z = zeros4();
  const CvaeLoss l = cvae_loss(z, z, torch::zeros({2, 2, 3, 3}, torch::kDouble),
                               torch::zeros({2, 2, 3, 3}, torch::kDouble), {});
  EXPECT_EQ(l.total.item<double>(), 0.0);
  EXPECT_EQ(l.recon.item<double>(), 0.0);
  EXPECT_EQ(l.grad.item<double>(), 0.0);
  EXPECT_EQ(l.kl.item<double>(), 0.0);
}

TEST(CvaeLoss, UnitMeanGivesHalfKl) {
  const auto z = zeros4();
  const CvaeLoss l = cvae_loss(z, z, torch::ones({2, 2, 3, 3}, torch::kDouble),
                               torch::zeros({2, 2, 3, 3}, torch::kDouble), {1.0, 1.0});
  EXPECT_NEAR(l.kl.item<double>(), 0.5, 1e-12);
  EXPECT_NEAR(l.total.item<double>(), 0.5, 1e-12);
}

TEST(CvaeLoss, ConstantOffsetHasNoGradientTerm) {
  const auto x = torch::randn({2, 2, 6, 6}, torch::kDouble);
  const auto mu = torch::zeros({2, 2, 3, 3}, torch::kDouble);
  const CvaeLoss l = cvae_loss(x + 0.1, x, mu, mu, {});
  EXPECT_NEAR(l.recon.item<double>(), 0.1, 1e-12);
  EXPECT_NEAR(l.grad.item<double>(), 0.0, 1e-12);
}

TEST(CvaeLoss, KlIsNonNegative) {
  torch::manual_seed(5);
  for (int i = 0; i < 50; ++i) {
    const auto mu = torch::randn({3, 2, 4, 4}, torch::kDouble) * 3;
    const auto lv = torch::randn({3, 2, 4, 4}, torch::kDouble) * 3;
    const auto z = zeros4(3);
    EXPECT_GE(cvae_loss(z, z, mu, lv, {}).kl.item<double>(), 0.0);
  }
}

TEST(CvaeLoss, RejectsBadWeightsAndShapes) {
  const auto z = zeros4();
  const auto m = torch::zeros({2, 2, 3, 3}, torch::kDouble);
  EXPECT_THROW(cvae_loss(z, z, m, m, {-1.0, 1e-4}), std::invalid_argument);
  EXPECT_THROW(cvae_loss(z, z, m, m, {1.0, std::nan("")}), std::invalid_argument);
  EXPECT_THROW(cvae_loss(z, zeros4(3), m, m, {}), std::invalid_argument);
}

TEST(CvaeLoss, ClosedFormGradientMatchesFiniteDifferences) {
  torch::manual_seed(11);
  const CvaeLossWeights w{0.7, 0.3};
  const auto x = torch::randn({2, 2, 6, 6}, torch::kDouble);
  const auto r = torch::randn({2, 2, 6, 6}, torch::kDouble);
  const auto mu = torch::randn({2, 2, 3, 3}, torch::kDouble);
  const auto lv = torch::randn({2, 2, 3, 3}, torch::kDouble) * 0.5;
  const CvaeLossGradients g = cvae_loss_gradients(r, x, mu, lv, w);
  const torch::Tensor fr = numeric_gradient(r.clone(), x, mu.clone(), lv.clone(), w, 0);
  const torch::Tensor fm = numeric_gradient(r.clone(), x, mu.clone(), lv.clone(), w, 1);
  const torch::Tensor fl = numeric_gradient(r.clone(), x, mu.clone(), lv.clone(), w, 2);
  EXPECT_LE(max_abs(g.recon - fr), 1e-4 * max_abs(fr));
  EXPECT_LE(max_abs(g.mu - fm), 1e-4 * max_abs(fm));
  EXPECT_LE(max_abs(g.logvar - fl), 1e-4 * max_abs(fl));

  auto ra = r.clone().requires_grad_(true);
  auto ma = mu.clone().requires_grad_(true);
  auto la = lv.clone().requires_grad_(true);
  cvae_loss(ra, x, ma, la, w).total.backward();
  EXPECT_LE(max_abs(ra.grad() - g.recon), 1e-12);
  EXPECT_LE(max_abs(ma.grad() - g.mu), 1e-12);
  EXPECT_LE(max_abs(la.grad() - g.logvar), 1e-12);
}

TEST(Film, IdentityAndAffine) {
  const auto f = torch::randn({2, 3, 4, 4});
  EXPECT_TRUE(torch::equal(film(f, torch::ones({2, 3}), torch::zeros({2, 3})), f));
  const auto out = film(torch::ones({1, 2, 2, 2}), torch::tensor({{2.0f, 3.0f}}), torch::tensor({{1.0f, -1.0f}}));
  EXPECT_TRUE(torch::allclose(out[0][0], torch::full({2, 2}, 3.0f)));
  EXPECT_TRUE(torch::allclose(out[0][1], torch::full({2, 2}, 2.0f)));
}

TEST(Reparameterize, TinyVarianceReturnsMean) {
  auto gen = make_generator(1, "t");
  const auto mu = torch::randn({4, 2, 3, 3}, torch::kDouble);
  const auto z = reparameterize(mu, torch::full_like(mu, -20.0), gen);
  EXPECT_LE(max_abs(z - mu), 1e-3);
}

TEST(Reparameterize, MomentsAndReproducibility) {
  auto gen = make_generator(2, "t");
  const auto mu = torch::full({100000}, 1.5, torch::kDouble);
  const auto lv = torch::full({100000}, std::log(4.0), torch::kDouble);
  const auto z = reparameterize(mu, lv, gen);
  EXPECT_NEAR(z.mean().item<double>(), 1.5, 0.02);
  EXPECT_NEAR(z.std().item<double>(), 2.0, 0.02);
  auto g1 = make_generator(9, "t");
  auto g2 = make_generator(9, "t");
  EXPECT_TRUE(torch::equal(reparameterize(mu, lv, g1), reparameterize(mu, lv, g2)));
  EXPECT_THROW(reparameterize(mu, lv.slice(0, 1), g1), std::invalid_argument);
}

TEST(CvaeNet, ShapesAndSequenceChecks) {
  torch::manual_seed(0);
  CvaeNet net(16, 1);
  const auto x = torch::randn({3, 2, 96, 96});
  const auto seq = torch::tensor({0, 2, 4}, torch::kLong);
  auto [mu, lv] = net->encode(x, seq);
  EXPECT_EQ(mu.sizes(), (std::vector<std::int64_t>{3, 2, 48, 48}));
  EXPECT_EQ(lv.sizes(), mu.sizes());
  EXPECT_EQ(net->decode(mu, seq).sizes(), x.sizes());
  EXPECT_THROW(net->encode(x, torch::tensor({0, 1, 5}, torch::kLong)), std::invalid_argument);
  EXPECT_THROW(net->encode(x, torch::tensor({0, -1, 2}, torch::kLong)), std::invalid_argument);
  EXPECT_THROW(net->encode(torch::randn({3, 2, 64, 64}), seq), std::invalid_argument);
  EXPECT_THROW(net->decode(torch::randn({3, 2, 24, 24}), seq), std::invalid_argument);
}

TEST(CvaeNet, SequenceModulationChangesOutputOnceTrained) {
  torch::manual_seed(0);
  CvaeNet net(16, 1);
  const auto z = torch::randn({1, 2, 48, 48});
  // zero-initialized modulation: every sequence decodes identically
  EXPECT_TRUE(torch::allclose(net->decode(z, torch::tensor({0}, torch::kLong)),
                              net->decode(z, torch::tensor({3}, torch::kLong))));
  {
    torch::NoGradGuard g;
    for (auto& p : net->named_parameters()) {
      if (p.key().find("modulation") != std::string::npos) p.value().normal_();
    }
  }
  EXPECT_FALSE(torch::allclose(net->decode(z, torch::tensor({0}, torch::kLong)),
                               net->decode(z, torch::tensor({3}, torch::kLong))));
}

TEST(CvaeNet, SingleBatchOverfits) {
  torch::manual_seed(3);
  CvaeNet net(16, 1);
  // smooth image-like fields
  const auto x = torch::nn::functional::interpolate(
      torch::randn({4, 2, 12, 12}) * 0.3,
      torch::nn::functional::InterpolateFuncOptions().size(std::vector<std::int64_t>{96, 96}).mode(torch::kBilinear).align_corners(false));
  const auto seq = torch::tensor({0, 1, 2, 3}, torch::kLong);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(2e-3));
  auto gen = make_generator(3, "overfit");
  double recon = 1e9;
  for (int i = 0; i < 500; ++i) {
    auto [mu, lv] = net->encode(x, seq);
    const auto z = reparameterize(mu, lv, gen);
    const CvaeLoss l = cvae_loss(net->decode(z, seq), x, mu, lv, {1.0, 1e-4});
    opt.zero_grad();
    l.total.backward();
    opt.step();
    recon = l.recon.item<double>();
  }
  EXPECT_LT(recon, 0.02);
}

TEST(CvaeModel, SaveLoadRoundTrip) {
  torch::manual_seed(4);
  CvaeConfig cfg;
  cfg.channels = 16;
  cfg.res_blocks = 1;
  CvaeModel m(cfg);
  m.stats.mean = {0.25, -0.5};
  m.stats.std = {2.0, 3.0};
  m.best_epoch = 7;
  m.log.push_back({1, 10, 0.5, 0.4, 0.45});
  const auto path = std::filesystem::temp_directory_path() / "cmri_cvae_roundtrip.ckpt";
  m.save(path);
  CvaeModel r = CvaeModel::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(r.best_epoch, 7);
  EXPECT_EQ(r.stats.mean, m.stats.mean);
  EXPECT_EQ(r.stats.std, m.stats.std);
  ASSERT_EQ(r.log.size(), 1u);
  const auto x = torch::randn({2, 2, 96, 96});
  const auto seq = torch::tensor({1, 4}, torch::kLong);
  EXPECT_TRUE(torch::equal(m.encode_mean(x, seq), r.encode_mean(x, seq)));
}

TEST(LatentStats, StandardizeRoundTrip) {
  const auto z = torch::randn({50, 2, 4, 4}) * 3 + 1;
  const LatentStats s = LatentStats::compute(z);
  const auto u = s.standardize(z);
  EXPECT_NEAR(u.select(1, 0).mean().item<double>(), 0.0, 1e-5);
  EXPECT_NEAR(u.select(1, 1).std(false).item<double>(), 1.0, 1e-4);
  EXPECT_LE(max_abs(s.destandardize(u) - z), 1e-4);
}

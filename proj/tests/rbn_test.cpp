#include <cmath>

#include <gtest/gtest.h>

#include "ptta/rbn.hpp"
#include "test_util.hpp"

using namespace ptta;
using ptta::testing::random_matrix;

namespace {

nn::DenseNet trained_like_net(std::uint64_t seed) {
  auto net = nn::DenseNet::mlp(4, {5, 3}, 3, seed);
  Rng rng(seed);
  for (int k = 0; k < net.num_bn_layers(); ++k) {
    const auto width = net.bn(k).gamma.size();
    net.bn_mut(k).running_mean = random_matrix(width, 1, rng);
    net.bn_mut(k).running_var = (random_matrix(width, 1, rng).array().abs() + 0.2).matrix();
  }
  return net;
}

}  // namespace

TEST(Rbn, InitCopiesRunningStatistics) {
  const auto net = trained_like_net(1);
  const auto rbn = RbnState::init_from_pretrained(net, 0.05);
  ASSERT_EQ(rbn.num_layers(), 2);
  for (int k = 0; k < 2; ++k) {
    EXPECT_EQ(rbn.provide(k).mean, net.bn(k).running_mean);
    EXPECT_EQ(rbn.provide(k).var, net.bn(k).running_var);
  }
  EXPECT_EQ(rbn.drift_norm(net), 0.0);
  EXPECT_EQ(rbn.alpha(), 0.05);
}

TEST(Rbn, EmaUpdateFormula) {
  const auto net = trained_like_net(2);
  auto rbn = RbnState::init_from_pretrained(net, 0.2);
  const nn::BnStats incoming{Vector::Constant(5, 3.0), Vector::Constant(5, 4.0)};
  rbn.ema_update(0, incoming);
  for (int i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ(rbn.provide(0).mean[i], 0.8 * net.bn(0).running_mean[i] + 0.2 * 3.0);
    EXPECT_DOUBLE_EQ(rbn.provide(0).var[i], 0.8 * net.bn(0).running_var[i] + 0.2 * 4.0);
  }
  EXPECT_EQ(rbn.provide(1).mean, net.bn(1).running_mean);
  EXPECT_EQ(rbn.layer_updates(), 1u);
  // The network's own statistics never move.
  EXPECT_NE(rbn.provide(0).mean, net.bn(0).running_mean);
  EXPECT_GT(rbn.drift_norm(net), 0.0);
}

TEST(Rbn, GeometricConvergenceToFixedStatistics) {
  const auto net = trained_like_net(3);
  const double alpha = 0.05;
  auto rbn = RbnState::init_from_pretrained(net, alpha);
  const Vector m = Vector::LinSpaced(5, -1.0, 2.0);
  const Vector v = Vector::LinSpaced(5, 0.5, 1.5);
  const Vector mean0 = rbn.provide(0).mean;
  const Vector var0 = rbn.provide(0).var;
  for (int k = 1; k <= 100; ++k) {
    rbn.ema_update(0, {m, v});
    const double factor = std::pow(1.0 - alpha, k);
    for (int i = 0; i < 5; ++i) {
      EXPECT_NEAR(std::abs(rbn.provide(0).mean[i] - m[i]), factor * std::abs(mean0[i] - m[i]), 1e-12);
      EXPECT_NEAR(std::abs(rbn.provide(0).var[i] - v[i]), factor * std::abs(var0[i] - v[i]), 1e-12);
    }
  }
}

TEST(Rbn, AlphaEdgeCases) {
  const auto net = trained_like_net(4);
  auto full = RbnState::init_from_pretrained(net, 1.0);
  const nn::BnStats incoming{Vector::Constant(5, -2.0), Vector::Constant(5, 0.25)};
  full.ema_update(0, incoming);
  EXPECT_EQ(full.provide(0).mean, incoming.mean);
  EXPECT_EQ(full.provide(0).var, incoming.var);
  EXPECT_THROW(RbnState::init_from_pretrained(net, 0.0), Error);
  EXPECT_THROW(RbnState::init_from_pretrained(net, 1.5), Error);
  EXPECT_THROW(RbnState::init_from_pretrained(net, std::nan("")), Error);
}

TEST(Rbn, InvalidStatisticsLeaveStateUntouched) {
  const auto net = trained_like_net(5);
  auto rbn = RbnState::init_from_pretrained(net, 0.1);
  const auto before = rbn.globals();
  EXPECT_THROW(rbn.ema_update(0, {Vector::Constant(5, std::nan("")), Vector::Ones(5)}), Error);
  EXPECT_THROW(rbn.ema_update(0, {Vector::Zero(5), Vector::Constant(5, -1.0)}), Error);
  EXPECT_THROW(rbn.ema_update(0, {Vector::Zero(4), Vector::Ones(4)}), Error);
  EXPECT_THROW(rbn.ema_update(2, {Vector::Zero(5), Vector::Ones(5)}), Error);
  // Second layer bad: the first layer must not be updated either.
  EXPECT_THROW(rbn.ema_update({{Vector::Zero(5), Vector::Ones(5)}, {Vector::Zero(3), -Vector::Ones(3)}}), Error);
  EXPECT_THROW(rbn.ema_update({{Vector::Zero(5), Vector::Ones(5)}}), Error);
  for (int k = 0; k < 2; ++k) {
    EXPECT_EQ(rbn.globals()[k].mean, before[k].mean);
    EXPECT_EQ(rbn.globals()[k].var, before[k].var);
  }
  EXPECT_EQ(rbn.layer_updates(), 0u);
}

TEST(Rbn, ForwardWithUpdateFoldsLayerInputStatistics) {
  const auto net = trained_like_net(6);
  auto rbn = RbnState::init_from_pretrained(net, 0.3);
  Rng rng(6);
  const Matrix x = random_matrix(12, 4, rng);
  const auto& lin = std::get<nn::Linear>(net.layers()[0]);
  const Matrix h = (x * lin.weight.transpose()).rowwise() + lin.bias.transpose();
  const auto s = nn::batch_stats(h);
  const auto updated = nn::forward(net, x, nn::StatsSource::rbn_global(rbn, true));
  EXPECT_TRUE(rbn.provide(0).mean.isApprox(0.7 * net.bn(0).running_mean + 0.3 * s.mean, 1e-12));
  EXPECT_TRUE(rbn.provide(0).var.isApprox(0.7 * net.bn(0).running_var + 0.3 * s.var, 1e-12));
  EXPECT_EQ(rbn.layer_updates(), 2u);
  // Normalization used the updated globals.
  const auto frozen = nn::forward(net, x, nn::StatsSource::rbn_global(rbn, false));
  EXPECT_TRUE(updated.logits.isApprox(frozen.logits, 1e-12));
  EXPECT_EQ(rbn.layer_updates(), 2u);
}

TEST(Rbn, InferenceUsesGlobalsNotBatchStatistics) {
  // A single-class-like batch: RBN output for a row does not depend on the rest of the batch.
  const auto net = trained_like_net(7);
  auto rbn = RbnState::init_from_pretrained(net, 0.05);
  Rng rng(7);
  Matrix x = random_matrix(6, 4, rng);
  const auto a = nn::forward(net, x, nn::StatsSource::rbn_global(rbn));
  x.bottomRows(5).array() += 10.0;
  const auto b = nn::forward(net, x, nn::StatsSource::rbn_global(rbn));
  EXPECT_TRUE(a.logits.row(0).isApprox(b.logits.row(0), 1e-14));
  const auto c = nn::forward(net, x, nn::StatsSource::test_batch());
  EXPECT_FALSE(a.logits.row(0).isApprox(c.logits.row(0), 1e-6));
}

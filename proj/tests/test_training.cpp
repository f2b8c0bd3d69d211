#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "dimlab/optim.hpp"
#include "dimlab/training.hpp"

using namespace dimlab;

namespace {

NamedParameter<double> scalar_param(double w, double g, bool decay = true) {
  Tensor t({1}, {w}, true);
  t.impl()->grad = {g};
  return {"w", t, true, decay};
}

void set_grad(NamedParameter<double>& p, double g) { p.tensor.impl()->grad = {g}; }

std::uint64_t trainable_checksum(const Network<double>& net) {
  return parameter_checksum(net.trainable_parameters());
}

Dataset small_data(std::size_t classes, double sep, std::uint64_t seed) {
  SyntheticSpec s;
  s.n_classes = classes;
  s.per_class_base = 64;
  s.input_dim = 16;
  s.class_sep = sep;
  s.seed = seed;
  return gen_synthetic_split(s).train;
}

NetworkConfig small_net(std::size_t d, std::uint64_t seed) {
  NetworkConfig c;
  c.input_dim = 16;
  c.backbone_hidden = {32};
  c.repr_dim = d;
  c.projector = ProjectorSpec::mlp({32, 16});
  c.init_seed = seed;
  return c;
}

TrainConfig small_train(Method m, std::size_t epochs) {
  TrainConfig t;
  t.method = m;
  t.base_lr = default_base_lr(m);
  t.epochs = epochs;
  t.warmup_epochs = 1;
  t.sampler.batch_size = 32;
  return t;
}

}  // namespace

TEST(Sgd, PlainGradientDescent) {
  std::vector<NamedParameter<double>> ps{scalar_param(2.0, 0.5)};
  std::vector<std::vector<double>> buf;
  sgd_momentum_step(ps, buf, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(ps[0].tensor[0], 2.0 - 0.1 * 0.5);
}

TEST(Sgd, ZeroGradLeavesParams) {
  std::vector<NamedParameter<double>> ps{scalar_param(2.0, 0.0)};
  std::vector<std::vector<double>> buf;
  sgd_momentum_step(ps, buf, 0.1, 0.9, 0.0);
  EXPECT_EQ(ps[0].tensor[0], 2.0);
}

TEST(Sgd, MomentumOnQuadraticMatchesRecurrence) {
  // f(w) = w^2, grad 2w.
  const double lr = 0.1, mu = 0.9;
  std::vector<NamedParameter<double>> ps{scalar_param(1.0, 2.0)};
  std::vector<std::vector<double>> buf;
  double w = 1.0, b = 0.0;
  for (int step = 0; step < 2; ++step) {
    set_grad(ps[0], 2.0 * ps[0].tensor[0]);
    sgd_momentum_step(ps, buf, lr, mu, 0.0);
    b = mu * b + 2.0 * w;
    w -= lr * b;
  }
  // Step 1: b=2, w=0.8. Step 2: b=0.9*2+1.6=3.4, w=0.8-0.34=0.46.
  EXPECT_NEAR(w, 0.46, 1e-15);
  EXPECT_EQ(ps[0].tensor[0], w);
}

TEST(Sgd, CoupledWeightDecaySkipsExemptParams) {
  std::vector<NamedParameter<double>> ps{scalar_param(2.0, 0.0, true), scalar_param(2.0, 0.0, false)};
  std::vector<std::vector<double>> buf;
  sgd_momentum_step(ps, buf, 0.5, 0.0, 0.1);
  EXPECT_DOUBLE_EQ(ps[0].tensor[0], 2.0 - 0.5 * 0.1 * 2.0);
  EXPECT_EQ(ps[1].tensor[0], 2.0);
}

TEST(Sgd, MissingGradIsContractError) {
  std::vector<NamedParameter<double>> ps{{"w", Tensor({1}, {1.0}, true), true, true}};
  std::vector<std::vector<double>> buf;
  EXPECT_THROW(sgd_momentum_step(ps, buf, 0.1, 0.9, 0.0), ContractError);
}

TEST(AdamW, ZeroGradOnlyDecays) {
  std::vector<NamedParameter<double>> ps{scalar_param(3.0, 0.0)};
  AdamWState<double> st;
  AdamWOptions o;
  o.weight_decay = 0.04;
  adamw_step(ps, st, 0.01, o, 1);
  EXPECT_DOUBLE_EQ(ps[0].tensor[0], 3.0 * (1.0 - 0.01 * 0.04));
  EXPECT_EQ(st.m[0][0], 0.0);
  EXPECT_EQ(st.v[0][0], 0.0);
}

TEST(AdamW, FirstStepIsSignLike) {
  AdamWOptions o;
  o.weight_decay = 0.0;
  for (double g : {1e-3, -0.5, 7.0}) {
    std::vector<NamedParameter<double>> ps{scalar_param(1.0, g)};
    AdamWState<double> st;
    adamw_step(ps, st, 0.01, o, 1);
    // Bias correction makes m_hat = g and v_hat = g^2 exactly.
    EXPECT_NEAR(ps[0].tensor[0], 1.0 - 0.01 * g / (std::abs(g) + 1e-8), 1e-15);
  }
}

TEST(AdamW, ConstantGradFiveStepsMatchOracle) {
  AdamWOptions o;
  o.weight_decay = 0.0;
  const double lr = 0.05, g = 0.3;
  std::vector<NamedParameter<double>> ps{scalar_param(0.7, g)};
  AdamWState<double> st;
  double w = 0.7, m = 0.0, v = 0.0;
  for (std::uint64_t t = 1; t <= 5; ++t) {
    set_grad(ps[0], g);
    adamw_step(ps, st, lr, o, t);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
    w -= lr * mh / (std::sqrt(vh) + 1e-8);
  }
  EXPECT_NEAR(ps[0].tensor[0], w, 1e-12);
}

TEST(AdamW, StepCountZeroRejected) {
  std::vector<NamedParameter<double>> ps{scalar_param(1.0, 1.0)};
  AdamWState<double> st;
  EXPECT_THROW(adamw_step(ps, st, 0.1, AdamWOptions{}, 0), ContractError);
}

TEST(Schedule, WarmupThenCosine) {
  const std::size_t total = 100, warm = 10;
  const double base = 0.05;
  for (std::size_t t = 0; t < warm; ++t) {
    EXPECT_NEAR(learning_rate_at(t, total, warm, base, true), base * (t + 1.0) / warm, 1e-12);
  }
  for (std::size_t t = warm; t < total; ++t) {
    const double ref =
        base * 0.5 * (1.0 + std::cos(std::numbers::pi * double(t - warm) / double(total - warm)));
    EXPECT_NEAR(learning_rate_at(t, total, warm, base, true), ref, 1e-12);
  }
  EXPECT_EQ(learning_rate_at(warm, total, warm, base, true), base);
  EXPECT_EQ(learning_rate_at(50, total, warm, base, false), base);
}

TEST(Pretrain, ZeroLrLeavesTrainableParams) {
  const auto ds = small_data(4, 6.0, 1);
  auto net = init_network<double>(small_net(16, 2));
  const auto before = trainable_checksum(net);
  auto cfg = small_train(Method::simclr, 1);
  cfg.base_lr = 0.0;
  cfg.warmup_epochs = 0;
  const auto h = pretrain(net, ds, cfg);
  EXPECT_EQ(h.epochs.size(), 1u);
  EXPECT_EQ(trainable_checksum(net), before);
}

TEST(Pretrain, ZeroEpochsRejected) {
  const auto ds = small_data(4, 6.0, 1);
  auto net = init_network<double>(small_net(16, 2));
  auto cfg = small_train(Method::simclr, 1);
  cfg.epochs = 0;
  cfg.warmup_epochs = 0;
  EXPECT_THROW((void)pretrain(net, ds, cfg), ConfigError);
}

TEST(Pretrain, DeterministicChecksum) {
  const auto ds = small_data(4, 6.0, 1);
  auto cfg = small_train(Method::vicreg, 3);
  auto a = init_network<double>(small_net(16, 5));
  auto b = init_network<double>(small_net(16, 5));
  const auto ha = pretrain(a, ds, cfg);
  const auto hb = pretrain(b, ds, cfg);
  EXPECT_EQ(ha.final_checksum, hb.final_checksum);
  ASSERT_EQ(ha.epochs.size(), hb.epochs.size());
  for (std::size_t e = 0; e < ha.epochs.size(); ++e) EXPECT_EQ(ha.epochs[e].mean_loss, hb.epochs[e].mean_loss);
}

TEST(Pretrain, SimclrTwoClassLossDecreases) {
  const auto ds = small_data(2, 6.0, 3);
  auto net = init_network<double>(small_net(32, 7));
  const auto h = pretrain(net, ds, small_train(Method::simclr, 20));
  ASSERT_EQ(h.epochs.size(), 20u);
  EXPECT_LT(h.epochs.back().mean_loss, h.epochs.front().mean_loss);
}

TEST(Pretrain, SupervisedLearnsAndNeedsHead) {
  const auto ds = small_data(4, 6.0, 4);
  auto nc = small_net(16, 8);
  nc.projector = ProjectorSpec::none();
  auto headless = init_network<double>(nc);
  EXPECT_THROW((void)pretrain(headless, ds, small_train(Method::supervised, 2)), ConfigError);
  nc.head = 4;
  auto net = init_network<double>(nc);
  const auto h = pretrain(net, ds, small_train(Method::supervised, 10));
  EXPECT_LT(h.epochs.back().mean_loss, 0.5 * h.epochs.front().mean_loss);
}

TEST(Pretrain, ClassRestrictedContractHoldsEveryBatch) {
  const auto ds = small_data(6, 6.0, 5);
  auto net = init_network<double>(small_net(16, 9));
  auto cfg = small_train(Method::simclr, 3);
  cfg.sampler.mode = SamplerConfig::Mode::class_restricted;
  cfg.sampler.classes_per_batch = 2;
  std::size_t batches = 0, violations = 0;
  const auto h = pretrain(net, ds, cfg, [&](std::size_t, std::size_t, std::span<const std::size_t> idx) {
    ++batches;
    violations += distinct_labels(ds, idx) > 2;
  });
  EXPECT_EQ(batches, h.steps);
  EXPECT_EQ(violations, 0u);
  EXPECT_LE(h.max_distinct_labels_per_batch, 2u);
}

TEST(Pretrain, NonFiniteLossAborts) {
  auto ds = small_data(2, 6.0, 6);
  for (auto& v : ds.inputs) v = std::numeric_limits<double>::quiet_NaN();
  auto net = init_network<double>(small_net(16, 10));
  try {
    (void)pretrain(net, ds, small_train(Method::vicreg, 2));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
  }
}

TEST(Pretrain, DimensionMismatch) {
  const auto ds = small_data(2, 6.0, 7);
  auto nc = small_net(16, 11);
  nc.input_dim = 8;
  auto net = init_network<double>(nc);
  EXPECT_THROW((void)pretrain(net, ds, small_train(Method::simclr, 2)), DimensionError);
}

// Default data and network, every default hyperparameter, three seeds.
TEST(Pretrain, DefaultConfigLossTrend) {
  const auto split = gen_synthetic_split(SyntheticSpec{10, 200, 1, 64, 6.0, 1.0, 0.0, 1000});
  for (Method m : {Method::simclr, Method::vicreg}) {
    for (std::uint64_t seed : {0, 1, 2}) {
      NetworkConfig nc{64, {128}, 64, ProjectorSpec::mlp({64, 64, 64}), std::nullopt, seed};
      auto net = init_network<double>(nc);
      TrainConfig cfg;
      cfg.method = m;
      cfg.base_lr = default_base_lr(m);
      cfg.seed = seed;
      cfg.sampler.seed = seed;
      const auto h = pretrain(net, split.train, cfg);
      EXPECT_LT(h.epochs.back().mean_loss, h.epochs.front().mean_loss)
          << to_string(m) << " seed " << seed;
    }
  }
}

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "dimlab/model.hpp"
#include "dimlab/verify.hpp"

using namespace dimlab;
using verify::detail::random_tensor;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.input_dim = 8;
  c.backbone_hidden = {};
  c.repr_dim = 4;
  c.projector = ProjectorSpec::linear(2);
  c.init_seed = 3;
  return c;
}

// Rank by Gaussian elimination with partial pivoting.
std::size_t rank_of(std::vector<double> a, std::size_t rows, std::size_t cols) {
  std::size_t rank = 0;
  for (std::size_t c = 0; c < cols && rank < rows; ++c) {
    std::size_t piv = rank;
    for (std::size_t r = rank; r < rows; ++r)
      if (std::abs(a[r * cols + c]) > std::abs(a[piv * cols + c])) piv = r;
    if (std::abs(a[piv * cols + c]) < 1e-10) continue;
    for (std::size_t k = 0; k < cols; ++k) std::swap(a[piv * cols + k], a[rank * cols + k]);
    for (std::size_t r = rank + 1; r < rows; ++r) {
      const double f = a[r * cols + c] / a[rank * cols + c];
      for (std::size_t k = c; k < cols; ++k) a[r * cols + k] -= f * a[rank * cols + k];
    }
    ++rank;
  }
  return rank;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dimlab_test_model_" + name);
}

}  // namespace

TEST(Model, ParameterCountFromShapes) {
  const auto cfg = small_config();
  EXPECT_EQ(parameter_count(cfg), 46u);
  EXPECT_EQ(init_network<double>(cfg).parameter_count(), 46u);
}

TEST(Model, ParameterCountMatchesNetworkForMlp) {
  NetworkConfig c;
  c.input_dim = 12;
  c.backbone_hidden = {20, 10};
  c.repr_dim = 16;
  c.projector = ProjectorSpec::mlp({8, 8, 4});
  c.head = 5;
  EXPECT_EQ(parameter_count(c), init_network<double>(c).parameter_count());
  c.projector = ProjectorSpec::mlp({8, 4}, false);
  EXPECT_EQ(parameter_count(c), init_network<double>(c).parameter_count());
}

TEST(Model, SameSeedSameParameters) {
  const auto a = init_network<double>(small_config());
  const auto b = init_network<double>(small_config());
  EXPECT_EQ(parameter_checksum(a), parameter_checksum(b));
  auto c = small_config();
  c.init_seed = 4;
  EXPECT_NE(parameter_checksum(a), parameter_checksum(init_network<double>(c)));
}

TEST(Model, InitIsFullRank) {
  NetworkConfig c;
  c.input_dim = 8;
  c.repr_dim = 64;
  c.projector = ProjectorSpec::none();
  const auto net = init_network<double>(c);
  const auto& w = net.backbone.front().weight;
  EXPECT_EQ(rank_of({w.values().begin(), w.values().end()}, 8, 64), 8u);
}

TEST(Model, HeScaling) {
  NetworkConfig c;
  c.input_dim = 200;
  c.repr_dim = 300;
  const auto net = init_network<double>(c);
  double ss = 0.0;
  for (double v : net.backbone.front().weight.values()) ss += v * v;
  const double var = ss / static_cast<double>(200 * 300);
  EXPECT_NEAR(var, 2.0 / 200.0, 0.05 * 2.0 / 200.0);
  for (double v : net.backbone.front().bias.values()) EXPECT_EQ(v, 0.0);
}

TEST(Model, ZeroWidthIsConfigError) {
  auto c = small_config();
  c.repr_dim = 0;
  EXPECT_THROW((void)init_network<double>(c), ConfigError);
  c = small_config();
  c.backbone_hidden = {4, 0};
  EXPECT_THROW((void)init_network<double>(c), ConfigError);
  c = small_config();
  c.projector = ProjectorSpec::mlp({});
  EXPECT_THROW((void)init_network<double>(c), ConfigError);
}

TEST(Backbone, OutputNonNegative) {
  NetworkConfig c;
  c.input_dim = 5;
  c.backbone_hidden = {7};
  c.repr_dim = 9;
  const auto net = init_network<double>(c);
  Rng rng(1);
  const auto h = backbone_forward(net, random_tensor({30, 5}, rng, 3.0, false));
  EXPECT_EQ(h.shape(), (Shape{30, 9}));
  for (double v : h.values()) EXPECT_GE(v, 0.0);
}

TEST(Backbone, ZeroWeightsGiveZero) {
  auto net = init_network<double>(small_config());
  for (auto& p : net.parameters()) {
    for (auto& v : p.tensor.mutable_values()) v = 0.0;
  }
  Rng rng(2);
  const auto h = backbone_forward(net, random_tensor({4, 8}, rng, 1.0, false));
  for (double v : h.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, IdentityWeightIsRelu) {
  NetworkConfig c;
  c.input_dim = 4;
  c.repr_dim = 4;
  auto net = init_network<double>(c);
  auto w = net.backbone.front().weight.mutable_values();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) w[i * 4 + j] = i == j ? 1.0 : 0.0;
  Rng rng(3);
  const auto x = random_tensor({6, 4}, rng, 1.0, false);
  const auto h = backbone_forward(net, x);
  for (std::size_t k = 0; k < x.numel(); ++k) EXPECT_EQ(h.values()[k], std::max(0.0, x.values()[k]));
}

TEST(Backbone, InputShapeMismatch) {
  const auto net = init_network<double>(small_config());
  EXPECT_THROW((void)backbone_forward(net, Tensor::zeros({2, 7})), DimensionError);
}

TEST(Projector, LinearShape) {
  auto net = init_network<double>(small_config());
  Rng rng(4);
  const auto z = projector_forward(net, random_tensor({5, 4}, rng, 1.0, false), Mode::train);
  EXPECT_EQ(z.shape(), (Shape{5, 2}));
}

TEST(Projector, SingleWidthMlpIsOneAffine) {
  NetworkConfig c;
  c.input_dim = 3;
  c.repr_dim = 6;
  c.projector = ProjectorSpec::mlp({5});
  auto net = init_network<double>(c);
  ASSERT_EQ(net.projector.size(), 1u);
  ASSERT_TRUE(net.projector_bn.empty());
  Rng rng(5);
  const auto h = random_tensor({4, 6}, rng, 1.0, false);
  const auto z = projector_forward(net, h, Mode::train);
  const auto ref = affine(h, net.projector[0].weight, net.projector[0].bias);
  for (std::size_t k = 0; k < z.numel(); ++k) EXPECT_EQ(z.values()[k], ref.values()[k]);
}

TEST(Projector, MlpMatchesStepByStep) {
  NetworkConfig c;
  c.input_dim = 3;
  c.repr_dim = 6;
  c.projector = ProjectorSpec::mlp({16, 8});
  c.init_seed = 9;
  auto net = init_network<double>(c);
  Rng rng(6);
  const std::size_t n = 5;
  const auto h = random_tensor({n, 6}, rng, 1.0, false);
  const auto z = projector_forward(net, h, Mode::train);

  // Scalar oracle: x W1, batch-norm with biased variance, ReLU, then x W2 + b2.
  const auto& w1 = net.projector[0].weight;
  const auto& bn = *net.projector_bn[0];
  std::vector<double> a(n * 16, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 16; ++j)
      for (std::size_t k = 0; k < 6; ++k) a[i * 16 + j] += h.at(i, k) * w1.at(k, j);
  for (std::size_t j = 0; j < 16; ++j) {
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += a[i * 16 + j];
    mu /= n;
    for (std::size_t i = 0; i < n; ++i) var += (a[i * 16 + j] - mu) * (a[i * 16 + j] - mu);
    var /= n;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = bn.gamma[j] * (a[i * 16 + j] - mu) / std::sqrt(var + 1e-5) + bn.beta[j];
      a[i * 16 + j] = std::max(0.0, y);
    }
  }
  const auto& w2 = net.projector[1].weight;
  const auto& b2 = net.projector[1].bias;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      double s = b2[j];
      for (std::size_t k = 0; k < 16; ++k) s += a[i * 16 + k] * w2.at(k, j);
      EXPECT_NEAR(z.at(i, j), s, 1e-12);
    }
}

TEST(Projector, NoneIsContractError) {
  NetworkConfig c;
  c.input_dim = 3;
  c.repr_dim = 4;
  auto net = init_network<double>(c);
  EXPECT_THROW((void)projector_forward(net, Tensor::zeros({2, 4}), Mode::train), ContractError);
}

TEST(Model, WidthLeverChangesOnlyAdjacentShapes) {
  NetworkConfig c;
  c.input_dim = 10;
  c.backbone_hidden = {12, 14};
  c.repr_dim = 16;
  c.projector = ProjectorSpec::mlp({8, 8, 4});
  auto shapes = [](const NetworkConfig& cfg) {
    std::map<std::string, Shape> m;
    for (const auto& p : init_network<double>(cfg).parameters()) m[p.name] = p.tensor.shape();
    return m;
  };
  const auto a = shapes(c);
  c.repr_dim = 64;
  const auto b = shapes(c);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, shape] : a) {
    const bool adjacent = name == "backbone.2.weight" || name == "backbone.2.bias" ||
                          name == "projector.0.weight";
    if (adjacent) {
      EXPECT_NE(shape, b.at(name)) << name;
    } else {
      EXPECT_EQ(shape, b.at(name)) << name;
    }
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  NetworkConfig c;
  c.input_dim = 6;
  c.backbone_hidden = {5};
  c.repr_dim = 7;
  c.projector = ProjectorSpec::mlp({4, 3});
  c.head = 2;
  c.init_seed = 12;
  auto net = init_network<double>(c);
  // Move the running statistics away from their initial values.
  Rng rng(7);
  (void)projector_forward(net, random_tensor({5, 7}, rng, 1.0, false), Mode::train);
  const auto path = temp_path("ckpt.bin");
  save_checkpoint(net, path.string());
  const auto back = load_checkpoint<double>(path.string());
  EXPECT_EQ(back.config, net.config);
  const auto pa = net.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    const std::vector<double> va(pa[i].tensor.values().begin(), pa[i].tensor.values().end());
    const std::vector<double> vb(pb[i].tensor.values().begin(), pb[i].tensor.values().end());
    EXPECT_EQ(va, vb) << pa[i].name;
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = temp_path("garbage.bin");
  std::ofstream(path) << "not a checkpoint";
  EXPECT_THROW((void)load_checkpoint<double>(path.string()), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW((void)load_checkpoint<double>(path.string()), Error);
}

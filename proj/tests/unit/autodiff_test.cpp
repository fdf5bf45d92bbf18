#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "preroute/autodiff/ops.hpp"
#include "preroute/autodiff/optim.hpp"
#include "preroute/error.hpp"

namespace {

using namespace preroute;
using ad::Tensor;
using oracle::gradcheck;
using oracle::project;
using oracle::random_tensor;

TEST(Autodiff, SoftmaxOfZerosIsUniform) {
  const auto y = ad::softmax(Tensor::from({0, 0, 0}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Autodiff, KlOfIdenticalDistributionsIsZero) {
  const auto p = Tensor({2, 3}, {0.2, 0.3, 0.5, 0.1, 0.1, 0.8});
  EXPECT_DOUBLE_EQ(ad::kl_divergence(p, p).item(), 0.0);
}

TEST(Autodiff, KlClosedForm) {
  const auto kl = ad::kl_divergence(Tensor::from({1, 0}), Tensor::from({0.5, 0.5}));
  EXPECT_NEAR(kl.item(), std::log(2.0), 1e-15);
}

TEST(Autodiff, SumOfSquaresGradient) {
  Tensor x = Tensor::from({1, 2}, true);
  ad::sum(ad::square(x)).backward();
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Autodiff, DetachedTensorGetsNoGradient) {
  Tensor x = Tensor::from({1, 2}, true);
  Tensor d = x.detach();
  ad::sum(ad::mul(x, d)).backward();
  EXPECT_FALSE(d.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Autodiff, NonScalarBackwardThrows) {
  Tensor x = Tensor::from({1, 2}, true);
  EXPECT_THROW(ad::square(x).backward(), ShapeError);
}

TEST(Autodiff, ShapeMismatchNamesBothShapes) {
  try {
    ad::add(Tensor::zeros({2, 3}), Tensor::zeros({2}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[2]"), std::string::npos);
  }
  EXPECT_THROW(ad::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Autodiff, BackwardVisitsSharedNodeOnce) {
  Tensor x = Tensor::from({3}, true);
  Tensor y = ad::square(x);
  // y feeds the loss twice; its own backward must still run only once.
  ad::sum(ad::add(y, y)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autodiff, CompositeGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  const auto a = random_tensor({3, 4}, rng);
  const auto b = random_tensor({4, 5}, rng);
  const auto w = random_tensor({5}, rng, 0.5, 1.5);
  auto f = [](const std::vector<Tensor>& in) {
    const auto h = ad::rms_norm(ad::silu(ad::matmul(in[0], in[1])), in[2]);
    return ad::cross_entropy(h, {0, 3, 4});
  };
  const auto res = gradcheck(f, {a, b, w}, 1e-6);
  EXPECT_LT(res.max_rel_error, 1e-5);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_tensor({5, 8}, rng, -30.0, 30.0);
    const auto y = ad::softmax(x);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_GE(y.data()[r * 8 + j], 0.0);
        s += y.data()[r * 8 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Autodiff, ForwardIsBitwiseDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(99);
    const auto a = random_tensor({4, 6}, rng);
    const auto b = random_tensor({6, 3}, rng);
    return ad::log_softmax(ad::gelu(ad::matmul(a, b)));
  };
  const auto r1 = run();
  const auto r2 = run();
  ASSERT_EQ(r1.size(), r2.size());
  for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_EQ(r1.data()[i], r2.data()[i]);
}

TEST(Autodiff, TopkBreaksTiesByLowestIndex) {
  const auto t = ad::topk_select(Tensor({2, 4}, {1, 1, 1, 1, 0, 2, 2, 1}), 2);
  EXPECT_EQ(t.indices, (std::vector<std::uint32_t>{0, 1, 1, 2}));
  EXPECT_FALSE(t.mask.requires_grad());
  EXPECT_DOUBLE_EQ(t.mask.data()[0], 1.0);
  EXPECT_DOUBLE_EQ(t.mask.data()[2], 0.0);
}

TEST(Autodiff, BroadcastOverLeadingDimensions) {
  Tensor a({2, 2}, {1, 2, 3, 4}, true);
  Tensor b({2}, {10, 20}, true);
  const auto y = ad::add(a, b);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{11, 22, 13, 24}));
  ad::sum(y).backward();
  EXPECT_DOUBLE_EQ(b.grad()[0], 2.0);
}

TEST(Optimizer, SgdStep) {
  ad::ParameterStore ps;
  auto& theta = ps.add("theta", Tensor::scalar(1.0));
  ad::sum(ad::scale(theta, 2.0)).backward();  // grad = 2
  ad::Optimizer opt({ad::OptimizerKind::sgd, 0.1});
  opt.step(ps);
  EXPECT_NEAR(ps.at("theta").item(), 0.8, 1e-15);
}

TEST(Optimizer, ZeroLearningRateLeavesParameters) {
  ad::ParameterStore ps;
  auto& theta = ps.add("theta", Tensor::from({1.5, -2.0}));
  ad::sum(ad::square(theta)).backward();
  ad::Optimizer opt({ad::OptimizerKind::adamw, 0.0});
  opt.step(ps);
  EXPECT_EQ(ps.at("theta").data()[0], 1.5);
  EXPECT_EQ(ps.at("theta").data()[1], -2.0);
}

TEST(Optimizer, AdamwFirstStepWithZeroBetas) {
  ad::ParameterStore ps;
  auto& theta = ps.add("theta", Tensor::from({1.0, 1.0}));
  // grad = [3, -0.5]
  ad::sum(ad::mul(theta, Tensor::from({3.0, -0.5}))).backward();
  const double lr = 0.01;
  const double eps = 1e-8;
  ad::Optimizer opt({ad::OptimizerKind::adamw, lr, 0.0, 0.0, eps, 0.0});
  opt.step(ps);
  // Hand evaluation: m = g, v = g^2, no bias correction at beta = 0.
  EXPECT_NEAR(ps.at("theta").data()[0], 1.0 - lr * 3.0 / (3.0 + eps), 1e-15);
  EXPECT_NEAR(ps.at("theta").data()[1], 1.0 - lr * -0.5 / (0.5 + eps), 1e-15);
}

TEST(Optimizer, NanGradientNamesParameter) {
  ad::ParameterStore ps;
  auto& w = ps.add("layer0.router", Tensor::from({1.0}));
  ad::sum(ad::mul(w, Tensor::from({std::nan("")}))).backward();
  ad::Optimizer opt({ad::OptimizerKind::sgd, 0.1});
  try {
    opt.step(ps);
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.router"), std::string::npos);
  }
  EXPECT_EQ(ps.at("layer0.router").item(), 1.0);
}

TEST(Optimizer, FrozenParameterUpdateIsRejected) {
  ad::ParameterStore ps;
  auto& w = ps.add("w", Tensor::from({1.0}));
  ad::sum(w).backward();
  ps.freeze("w");
  ad::Optimizer opt({ad::OptimizerKind::sgd, 0.1});
  EXPECT_THROW(opt.step(ps), FrozenParameterError);
  EXPECT_EQ(ps.at("w").item(), 1.0);
}

TEST(Optimizer, NegativeLearningRateRejected) {
  EXPECT_THROW(ad::Optimizer({ad::OptimizerKind::sgd, -1.0}), ConfigError);
}

TEST(Optimizer, WarmupCosineSchedule) {
  EXPECT_DOUBLE_EQ(ad::warmup_cosine_lr(1.0, 0, 10, 100), 0.1);
  EXPECT_DOUBLE_EQ(ad::warmup_cosine_lr(1.0, 10, 10, 100), 1.0);
  EXPECT_NEAR(ad::warmup_cosine_lr(1.0, 100, 10, 100, 0.1), 0.1, 1e-12);
}

}  // namespace

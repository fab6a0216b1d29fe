#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "robustlens/attacks.h"
#include "test_support.h"

namespace rl {
namespace {

using testing::random_tensor;

double l2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

TEST(Project, L2RescalesOntoSphere) {
  Tensor<double> d({4}, {1.2, -1.6, 0.0, 0.0});  // norm 2
  const auto p = project(d, Norm::kL2, 0.5);
  EXPECT_NEAR(l2(p.data()), 0.5, 1e-6);
  for (Index i = 0; i < 4; ++i) EXPECT_NEAR(p[i], d[i] * 0.25, 1e-12);
}

TEST(Project, FeasiblePointIsReturnedBitIdentical) {
  Tensor<double> d({3}, {0.1, -0.2, 0.3});
  EXPECT_EQ(project(d, Norm::kL2, 0.5), d);
  EXPECT_EQ(project(d, Norm::kLinf, 0.5), d);
}

TEST(Project, LinfClampsElementwise) {
  Tensor<double> d({2}, {0.7, -0.2});
  EXPECT_EQ(project(d, Norm::kLinf, 0.5), (Tensor<double>({2}, {0.5, -0.2})));
  Tensor<double> e({2}, {-3.0, 0.5});
  EXPECT_EQ(project(e, Norm::kLinf, 0.5), (Tensor<double>({2}, {-0.5, 0.5})));
}

TEST(Project, ZeroMapsToZero) {
  Tensor<double> z({5});
  EXPECT_EQ(project(z, Norm::kL2, 0.5), z);
  EXPECT_EQ(project(z, Norm::kLinf, 0.5), z);
}

TEST(Project, RowsAreProjectedIndependently) {
  Tensor<double> d({2, 2}, {3.0, 4.0, 0.1, 0.1});
  const auto p = project_rows(d, Norm::kL2, 1.0);
  EXPECT_NEAR(p[0], 0.6, 1e-12);
  EXPECT_NEAR(p[1], 0.8, 1e-12);
  EXPECT_EQ(p[2], 0.1);
  EXPECT_EQ(p[3], 0.1);
}

TEST(Config, InvalidValuesAreRejected) {
  AttackConfig c;
  c.iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.epsilon = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.step = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_norm("linf"), Norm::kLinf);
  EXPECT_THROW(parse_norm("l1"), ConfigError);
}

TEST(RandomInit, DrawsLieInsideTheBall) {
  std::mt19937_64 rng(9);
  for (Norm norm : {Norm::kL2, Norm::kLinf}) {
    const auto d = random_ball_init<double>({64, 3, 4, 4}, norm, 0.5, rng);
    for (Index i = 0; i < 64; ++i) EXPECT_LE(norm_of<double>(d.row(i), norm), 0.5 + 1e-12);
  }
}

TEST(RandomInit, L2DrawsFillTheBallRadially) {
  // Uniform in a d-ball: P(r <= t*eps) = t^d, so the median radius is 0.5^(1/d).
  std::mt19937_64 rng(10);
  const Index d = 4;
  const auto draws = random_ball_init<double>({4000, d}, Norm::kL2, 1.0, rng);
  std::vector<double> radii;
  for (Index i = 0; i < 4000; ++i) radii.push_back(norm_of<double>(draws.row(i), Norm::kL2));
  std::nth_element(radii.begin(), radii.begin() + 2000, radii.end());
  EXPECT_NEAR(radii[2000], std::pow(0.5, 1.0 / d), 0.02);
}

// Two-class linear scorer: logits (0, w.x).
struct LinearScorer {
  Tensor<double> weight;  // [2, D]
  explicit LinearScorer(const Tensor<double>& w) : weight({2, w.size()}) {
    for (Index i = 0; i < w.size(); ++i) weight[w.size() + i] = w[i];
  }
  LogitsFn<double> fn() const {
    return [w = weight](const Var<double>& x) { return linear(x, x.tape().constant(w), std::optional<Var<double>>{}); };
  }
};

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i];
  return ab / (l2(a) * l2(b));
}

TEST(Pgd, LinearModelConvergesToClosedFormOptimum) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const auto w = random_tensor<double>({12}, rng);
    const auto x = random_tensor<double>({1, 12}, rng);
    const int label = trial % 2;
    // On the sphere each normalised step shrinks tan(angle to optimum) by
    // about 1 / (1 + step / epsilon); step = epsilon / 2 gives 1.5^-20 over
    // K = 20 from any random start.
    AttackConfig config;
    config.iterations = 20;
    config.step = 0.25;
    config.clip.reset();
    config.seed = trial;
    const auto result = pgd_attack(LinearScorer(w).fn(), x, std::vector<int>{label}, config);
    // The loss gradient of label 1 points along -w, of label 0 along +w.
    auto optimum = w;
    if (label == 1) {
      for (auto& v : optimum.data()) v = -v;
    }
    EXPECT_GE(cosine(result.delta.data(), optimum.data()), 0.999);
    EXPECT_NEAR(l2(result.delta.data()), 0.5, 1e-6);
  }
}

TEST(Pgd, LinearModelFromZeroStepsStraightToOptimum) {
  std::mt19937_64 rng(14);
  const auto w = random_tensor<double>({12}, rng);
  const auto x = random_tensor<double>({1, 12}, rng);
  AttackConfig config;
  config.iterations = 20;
  config.random_init = false;
  config.clip.reset();
  const auto result = pgd_attack(LinearScorer(w).fn(), x, std::vector<int>{0}, config);
  EXPECT_GE(cosine(result.delta.data(), w.data()), 0.999);
  EXPECT_NEAR(l2(result.delta.data()), 0.5, 1e-6);
}

TEST(Pgd, LinfLinearModelReachesSignCorner) {
  std::mt19937_64 rng(12);
  const auto w = random_tensor<double>({8}, rng);
  const auto x = random_tensor<double>({1, 8}, rng);
  AttackConfig config;
  config.norm = Norm::kLinf;
  config.epsilon = 0.1;
  config.step = 0.05;
  config.iterations = 10;
  config.clip.reset();
  const auto result = pgd_attack(LinearScorer(w).fn(), x, std::vector<int>{0}, config);
  for (Index i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(result.delta[i], w[i] > 0 ? 0.1 : -0.1);
}

TEST(Pgd, ZeroGradientTakesNoStep) {
  const LogitsFn<double> constant = [](const Var<double>& x) {
    const std::optional<Var<double>> none{};
    return mul(linear(x, x.tape().constant(Tensor<double>({2, 3})), none), x.tape().constant(Tensor<double>({1, 2})));
  };
  AttackConfig config;
  config.random_init = false;
  const auto x = Tensor<double>({1, 3}, {0.2, 0.4, 0.6});
  const auto result = pgd_attack(constant, x, std::vector<int>{1}, config);
  for (double v : result.delta.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(result.adversarial, x);
}

TEST(Pgd, OutputsStayInPixelRange) {
  std::mt19937_64 rng(13);
  const auto w = random_tensor<double>({6}, rng);
  Tensor<double> x({4, 6});
  x.fill(0.98);
  AttackConfig config;
  config.epsilon = 2.0;
  config.step = 0.5;
  const auto result = pgd_attack(LinearScorer(w).fn(), x, std::vector<int>{0, 1, 0, 1}, config);
  for (Index i = 0; i < x.size(); ++i) {
    EXPECT_GE(result.adversarial[i], 0.0);
    EXPECT_LE(result.adversarial[i], 1.0);
    EXPECT_DOUBLE_EQ(result.delta[i], result.adversarial[i] - x[i]);
  }
}

class TrainedModel : public ::testing::Test {
 protected:
  static const testing::TrainedFixture& fx() { return testing::standard_fixture(); }
  static Tensor<float> images(Index n) { return slice_rows(fx().test_set.images, 0, n); }
  static std::vector<int> labels(Index n) {
    return {fx().test_set.labels.begin(), fx().test_set.labels.begin() + n};
  }
  static double error_rate(const Tensor<float>& x, std::span<const int> y) {
    const auto predicted = argmax_rows(predict_logits(fx().network, x));
    Index wrong = 0;
    for (std::size_t i = 0; i < y.size(); ++i) wrong += predicted[i] != y[i];
    return 100.0 * static_cast<double>(wrong) / static_cast<double>(y.size());
  }
};

TEST_F(TrainedModel, AdversarialLossExceedsCleanLoss) {
  const auto x = images(128);
  const auto y = labels(128);
  const auto model = logits_of(fx().network);
  const auto result = pgd_attack(model, x, y, AttackConfig{});
  EXPECT_GE(mean_loss(model, result.adversarial, y), mean_loss(model, x, y));
}

TEST_F(TrainedModel, EveryPerturbationIsFeasible) {
  const auto x = images(64);
  const auto y = labels(64);
  for (Norm norm : {Norm::kL2, Norm::kLinf}) {
    AttackConfig config;
    config.norm = norm;
    config.epsilon = norm == Norm::kL2 ? 0.5 : 8.0 / 255.0;
    config.step = norm == Norm::kL2 ? 0.1 : 2.0 / 255.0;
    const auto result = pgd_attack(fx().network, x, y, config);
    for (Index i = 0; i < 64; ++i) EXPECT_LE(norm_of<float>(result.delta.row(i), norm), config.epsilon + 1e-6);
  }
}

TEST_F(TrainedModel, SameSeedGivesIdenticalExamples) {
  const auto x = images(32);
  const auto y = labels(32);
  AttackConfig config;
  config.seed = 77;
  EXPECT_EQ(pgd_attack(fx().network, x, y, config).adversarial, pgd_attack(fx().network, x, y, config).adversarial);
  config.seed = 78;
  const auto other = pgd_attack(fx().network, x, y, config).adversarial;
  config.seed = 77;
  EXPECT_NE(pgd_attack(fx().network, x, y, config).adversarial, other);
}

TEST_F(TrainedModel, LargerBallIsAtLeastAsThreatening) {
  const Index n = 256;
  const auto x = images(n);
  const auto y = labels(n);
  AttackConfig full;
  AttackConfig half = full;
  half.epsilon = full.epsilon / 2;
  const double at_full = error_rate(pgd_attack(fx().network, x, y, full).adversarial, y);
  const double at_half = error_rate(pgd_attack(fx().network, x, y, half).adversarial, y);
  EXPECT_GE(at_full + 2.0, at_half);
}

}  // namespace
}  // namespace rl

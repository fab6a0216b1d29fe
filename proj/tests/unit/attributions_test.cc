#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "robustlens/attributions.h"
#include "test_support.h"

namespace rl {
namespace {

using testing::random_tensor;

ScoreFn<double> softmax_score(const Network<double>& net, int target) {
  return target_score<double>(logits_of(net), target);
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

TEST(IntegratedGradients, IdenticalInputAndBaselineGiveZeroMap) {
  std::mt19937_64 rng(1);
  const auto net = build_network<double>(testing::micro_spec(8), 1);
  const auto x = random_tensor<double>({3, 8, 8}, rng, 0, 1);
  const auto map = integrated_gradients(softmax_score(net, 2), x, x, {.steps = 16});
  for (double v : map.values.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(map.values.shape(), x.shape());
}

TEST(IntegratedGradients, ZeroStepsIsAConfigError) {
  const auto w = Tensor<double>({3}, {1, 2, 3});
  EXPECT_THROW(integrated_gradients(linear_score(w), w, Tensor<double>({3}), {.steps = 0}), ConfigError);
}

TEST(IntegratedGradients, ShapeMismatchIsRejected) {
  const auto w = Tensor<double>({3}, {1, 2, 3});
  EXPECT_THROW(integrated_gradients(linear_score(w), w, Tensor<double>({4}), {}), DimensionError);
}

TEST(IntegratedGradients, TrapezoidIsExactForLinearScores) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto w = random_tensor<double>({3, 4, 4}, rng);
    const auto x = random_tensor<double>({3, 4, 4}, rng);
    const auto base = random_tensor<double>({3, 4, 4}, rng);
    const auto map = integrated_gradients(linear_score(w), x, base,
                                          {.steps = 1 + trial * 7, .normalization = IgNormalization::kTrapezoid});
    for (Index d = 0; d < x.size(); ++d) EXPECT_NEAR(map.values[d], w[d] * (x[d] - base[d]), 1e-8);
  }
}

TEST(IntegratedGradients, LiteralStepScalesTrapezoidByMOverMPlusOne) {
  std::mt19937_64 rng(3);
  const auto w = random_tensor<double>({10}, rng);
  const auto x = random_tensor<double>({10}, rng);
  const Tensor<double> base({10});
  for (int m : {1, 4, 64, 512}) {
    const auto map = integrated_gradients(linear_score(w), x, base, {.steps = m});
    EXPECT_EQ(map.normalization, IgNormalization::kLiteral);
    for (Index d = 0; d < 10; ++d) EXPECT_NEAR(map.values[d], w[d] * x[d] * m / (m + 1.0), 1e-12);
  }
}

TEST(IntegratedGradients, ChunkingDoesNotChangeTheResult) {
  std::mt19937_64 rng(4);
  const auto net = build_network<double>(testing::micro_spec(8), 4);
  const auto x = random_tensor<double>({3, 8, 8}, rng, 0, 1);
  const Tensor<double> base({3, 8, 8});
  const auto a = integrated_gradients(softmax_score(net, 1), x, base, {.steps = 20, .chunk = 64});
  const auto b = integrated_gradients(softmax_score(net, 1), x, base, {.steps = 20, .chunk = 3});
  EXPECT_LE(testing::max_abs_diff(a.values, b.values), 1e-15);
}

TEST(IntegratedGradients, TrapezoidCompletenessOnTrainedModel) {
  const auto& fx = testing::standard_fixture();
  const auto net = fx.network.cast<double>();
  for (Index i = 0; i < 4; ++i) {
    const auto x = fx.test_set.image(i * 7).cast<double>();
    const Tensor<double> base(x.shape());
    const auto score = softmax_score(net, fx.test_set.labels[i * 7]);
    const auto map = integrated_gradients(score, x, base, {.steps = 512, .normalization = IgNormalization::kTrapezoid});
    const double gap = map.score_input - map.score_baseline;
    EXPECT_LE(std::abs(map.total() - gap), 1e-3 * std::abs(gap) + 1e-5) << "sample " << i * 7;
    EXPECT_DOUBLE_EQ(map.score_input, evaluate_scores(score, as_batch(x))[0]);
  }
}

TEST(IntegratedGradients, PermutingInputsAndWiringPermutesAttributions) {
  // s(x) = (w . x)^2 + (w . x)^3 with inputs reversed, and weights reversed to match.
  std::mt19937_64 rng(5);
  const auto w = random_tensor<double>({8}, rng);
  Tensor<double> w_rev({8});
  for (Index d = 0; d < 8; ++d) w_rev[d] = w[7 - d];
  auto nonlinear = [](Tensor<double> weights) -> ScoreFn<double> {
    auto lin = linear_score(std::move(weights));
    return [lin](const Var<double>& b) {
      auto t = lin(b);
      auto t2 = mul(t, t);
      return add(t2, mul(t2, t));
    };
  };
  const auto x = random_tensor<double>({8}, rng);
  const auto base = random_tensor<double>({8}, rng);
  Tensor<double> x_rev({8}), base_rev({8});
  for (Index d = 0; d < 8; ++d) x_rev[d] = x[7 - d], base_rev[d] = base[7 - d];
  const auto a = integrated_gradients(nonlinear(w), x, base, {.steps = 32});
  const auto b = integrated_gradients(nonlinear(w_rev), x_rev, base_rev, {.steps = 32});
  for (Index d = 0; d < 8; ++d) EXPECT_NEAR(a.values[d], b.values[7 - d], 1e-14);
  const auto c = integrated_gradients(nonlinear(w), x, x_rev, {.steps = 32});
  EXPECT_GT(testing::max_abs_diff(a.values, c.values), 1e-6);
}

// 100000-point left Riemann sum of the path integral, on an untrained
// micro-resnet at 8x8.
TEST(IntegratedGradients, AgreesWithFineRiemannSum) {
  std::mt19937_64 rng(6);
  const auto net = build_network<double>(testing::micro_spec(8), 6);
  const auto x = random_tensor<double>({3, 8, 8}, rng, 0, 1);
  const Tensor<double> base({3, 8, 8});
  const auto score = softmax_score(net, 0);
  const Index n = 100000, chunk = 250;
  Tensor<double> grad_sum(x.shape());
  for (Index begin = 0; begin < n; begin += chunk) {
    Tensor<double> points({chunk, 3, 8, 8});
    for (Index k = 0; k < chunk; ++k) {
      const double alpha = static_cast<double>(begin + k) / n;
      auto row = points.row(k);
      for (Index d = 0; d < x.size(); ++d) row[d] = base[d] + alpha * (x[d] - base[d]);
    }
    const auto g = score_gradients(score, points);
    for (Index k = 0; k < chunk; ++k) {
      const auto row = g.row(k);
      for (Index d = 0; d < x.size(); ++d) grad_sum[d] += row[d];
    }
  }
  Tensor<double> oracle(x.shape());
  for (Index d = 0; d < x.size(); ++d) oracle[d] = (x[d] - base[d]) * grad_sum[d] / n;
  for (auto norm : {IgNormalization::kLiteral, IgNormalization::kTrapezoid}) {
    const auto map = integrated_gradients(score, x, base, {.steps = 512, .normalization = norm});
    EXPECT_LE(testing::max_abs_diff(map.values, oracle), 1e-4) << normalization_name(norm);
  }
}

TEST(ExpectedGradients, BackgroundEqualToInputGivesZeroMap) {
  std::mt19937_64 rng(7);
  const auto net = build_network<double>(testing::micro_spec(8), 7);
  const auto x = random_tensor<double>({3, 8, 8}, rng, 0, 1);
  const auto map = expected_gradients(softmax_score(net, 0), x, as_batch(x), {.samples = 32});
  for (double v : map.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(ExpectedGradients, EmptyBackgroundIsRejected) {
  const auto w = Tensor<double>({3}, {1, 2, 3});
  EXPECT_THROW(expected_gradients(linear_score(w), w, Tensor<double>({0, 3}), {}), DimensionError);
}

TEST(ExpectedGradients, LinearModelConvergesToMeanBaselineWithinThreeStandardErrors) {
  std::mt19937_64 rng(8);
  const Index dims = 12, m = 64, ns = 4096;
  const auto w = random_tensor<double>({dims}, rng);
  const auto x = random_tensor<double>({dims}, rng);
  const auto background = random_tensor<double>({m, dims}, rng);
  const auto map = expected_gradients(linear_score(w), x, background, {.samples = ns, .seed = 3});
  for (Index d = 0; d < dims; ++d) {
    std::vector<double> column;
    for (Index j = 0; j < m; ++j) column.push_back(background[j * dims + d]);
    const double mu = mean(column);
    double var = 0.0;
    for (double v : column) var += (v - mu) * (v - mu);
    var /= m;
    // Each draw contributes w_d (x_d - x'_d): a baseline draw is the only noise.
    const double se = std::abs(w[d]) * std::sqrt(var / ns);
    EXPECT_LE(std::abs(map.values[d] - w[d] * (x[d] - mu)), 3.0 * se) << "feature " << d;
  }
}

TEST(ExpectedGradients, MatchesExactShapleyOfTheBackgroundAveragedGame) {
  std::mt19937_64 rng(9);
  const Index dims = 6, m = 32;
  const auto w = random_tensor<double>({dims}, rng);
  const auto x = random_tensor<double>({dims}, rng);
  const auto background = random_tensor<double>({m, dims}, rng);
  const auto map = expected_gradients(linear_score(w), x, background, {.samples = 8192, .seed = 4});

  const auto f = [&w](std::span<const double> p) {
    double s = 0.0;
    for (Index d = 0; d < dims; ++d) s += w[d] * p[d];
    return s;
  };
  std::vector<double> oracle(dims, 0.0);
  for (Index j = 0; j < m; ++j) {
    const auto phi = exact_shapley(f, x.data(), background.row(j));
    for (Index d = 0; d < dims; ++d) oracle[d] += phi[d] / m;
  }
  const auto [lo, hi] = std::minmax_element(oracle.begin(), oracle.end());
  const double range = *hi - *lo;
  for (Index d = 0; d < dims; ++d) EXPECT_LE(std::abs(map.values[d] - oracle[d]), 0.02 * range) << "feature " << d;
}

TEST(ExpectedGradients, SeededAndDeterministic) {
  std::mt19937_64 rng(10);
  const auto net = build_network<double>(testing::micro_spec(8), 10);
  const auto x = random_tensor<double>({3, 8, 8}, rng, 0, 1);
  const auto bg = random_tensor<double>({5, 3, 8, 8}, rng, 0, 1);
  const auto score = softmax_score(net, 3);
  const auto a = expected_gradients(score, x, bg, {.samples = 16, .seed = 1});
  EXPECT_EQ(a.values, expected_gradients(score, x, bg, {.samples = 16, .seed = 1}).values);
  EXPECT_NE(a.values, expected_gradients(score, x, bg, {.samples = 16, .seed = 2}).values);
}

TEST(ExpectedGradients, EstimatorIsUnbiasedAcrossSeeds) {
  // Nonlinear 6-feature score s(x) = (a . x)^2 * (b . x).
  std::mt19937_64 rng(11);
  const Index dims = 6;
  const auto a = random_tensor<double>({dims}, rng);
  const auto b = random_tensor<double>({dims}, rng);
  const ScoreFn<double> score = [sa = linear_score(a), sb = linear_score(b)](const Var<double>& batch) {
    auto t = sa(batch);
    return mul(mul(t, t), sb(batch));
  };
  const auto x = random_tensor<double>({dims}, rng);
  const auto bg = random_tensor<double>({16, dims}, rng);
  const int seeds = 20;
  std::vector<std::vector<double>> runs;
  for (int s = 0; s < seeds; ++s) {
    const auto m = expected_gradients(score, x, bg, {.samples = 256, .seed = static_cast<std::uint64_t>(100 + s)});
    runs.emplace_back(m.values.data().begin(), m.values.data().end());
  }
  const auto big = expected_gradients(score, x, bg, {.samples = 16384, .seed = 999});
  for (Index d = 0; d < dims; ++d) {
    std::vector<double> col;
    for (const auto& r : runs) col.push_back(r[d]);
    const double mu = mean(col);
    double var = 0.0;
    for (double v : col) var += (v - mu) * (v - mu);
    var /= seeds - 1;
    // Standard error of the seed mean, plus that of the 64x larger run.
    const double sigma = std::sqrt(var / seeds + var / 64.0);
    EXPECT_LE(std::abs(mu - big.values[d]), 3.0 * sigma) << "feature " << d;
  }
}

TEST(ExactShapley, AdditiveGameGivesPerFeatureDifferences) {
  const std::vector<double> x{0.3, -1.2, 2.0, 0.7, 1.1};
  const std::vector<double> base{0.0, 0.5, -0.4, 0.2, 0.9};
  auto part = [](std::size_t d, double v) { return std::sin((d + 1) * v) + v * v * d; };
  const auto f = [&](std::span<const double> p) {
    double s = 0.0;
    for (std::size_t d = 0; d < p.size(); ++d) s += part(d, p[d]);
    return s;
  };
  const auto phi = exact_shapley(f, x, base);
  for (std::size_t d = 0; d < x.size(); ++d) EXPECT_NEAR(phi[d], part(d, x[d]) - part(d, base[d]), 1e-12);
}

TEST(ExactShapley, SymmetricPlayersReceiveEqualValues) {
  const std::vector<double> x{0.8, 0.8, -0.3, 1.5};
  const std::vector<double> base{0.1, 0.1, 0.0, 0.0};
  const auto f = [](std::span<const double> p) { return std::exp(p[0] * p[1]) + p[2] * (p[0] + p[1]) + p[3]; };
  const auto phi = exact_shapley(f, x, base);
  EXPECT_NEAR(phi[0], phi[1], 1e-14);
}

TEST(ExactShapley, EfficiencyHoldsForInteractingGame) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> x(10), base(10);
  for (auto& v : x) v = u(rng);
  for (auto& v : base) v = u(rng);
  const auto f = [](std::span<const double> p) {
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < p.size(); ++i) s += std::tanh(p[i] * p[i + 1]) + p[i] * p[i] * p[i];
    return s;
  };
  const auto phi = exact_shapley(f, x, base);
  EXPECT_NEAR(std::accumulate(phi.begin(), phi.end(), 0.0), f(x) - f(base), 1e-9);
}

TEST(ExactShapley, RefusesMoreThanTwelveFeatures) {
  const std::vector<double> x(13, 1.0), base(13, 0.0);
  const auto f = [](std::span<const double>) { return 0.0; };
  EXPECT_NO_THROW(exact_shapley(f, std::span(x).first(12), std::span(base).first(12)));
  EXPECT_THROW(exact_shapley(f, x, base), ConfigError);
}

AttributionMap map_of(Tensor<double> values) {
  AttributionMap map;
  map.values = std::move(values);
  return map;
}

TEST(Render, ZeroMapIsNeutralEverywhere) {
  std::mt19937_64 rng(13);
  const auto image = random_tensor<float>({3, 5, 6}, rng, 0, 1);
  const auto out = render_attribution(map_of(Tensor<double>({3, 5, 6})), image);
  EXPECT_EQ(out.heatmap.shape(), image.shape());
  EXPECT_EQ(out.blended.shape(), image.shape());
  for (Index i = 0; i < 30; ++i) {
    for (Index c = 0; c < 3; ++c) EXPECT_EQ(out.heatmap[c * 30 + i], out.heatmap[i]);
    EXPECT_EQ(out.heatmap[i], out.heatmap[0]);
  }
}

TEST(Render, SinglePositivePixelIsTheUniqueWarmExtreme) {
  Tensor<double> values({3, 4, 4});
  values[16 + 5] = 2.5;  // green channel, pixel (1, 1)
  const auto out = render_attribution(map_of(values), Tensor<float>({3, 4, 4}, 0.5f));
  Index warmest = -1;
  for (Index i = 0; i < 16; ++i) {
    const float red_minus_blue = out.heatmap[i] - out.heatmap[32 + i];
    if (red_minus_blue > 0.3f) {
      EXPECT_EQ(warmest, -1);
      warmest = i;
    } else {
      EXPECT_FLOAT_EQ(red_minus_blue, 0.0f);
    }
  }
  EXPECT_EQ(warmest, 5);
}

TEST(Render, NegativeValuesAreCool) {
  Tensor<double> values({1, 2, 2});
  values[0] = -1.0;
  values[3] = 0.5;
  const auto out = render_attribution(map_of(values), Tensor<float>({1, 2, 2}));
  EXPECT_GT(out.heatmap[2 * 4 + 0], out.heatmap[0]);  // blue above red
  EXPECT_GT(out.heatmap[3], out.heatmap[2 * 4 + 3]);  // red above blue
}

TEST(Render, ImageShapeMismatchIsRejected) {
  EXPECT_THROW(render_attribution(map_of(Tensor<double>({3, 4, 4})), Tensor<float>({3, 4, 5})), DimensionError);
}

TEST(Serialization, AttributionRoundTripsThroughFileAndSidecar) {
  std::mt19937_64 rng(14);
  AttributionMap map = map_of(random_tensor<double>({3, 4, 4}, rng));
  map.method = AttributionMethod::kExpectedGradients;
  map.target = 2;
  map.samples = 64;
  map.seed = 9;
  map.score_input = 0.75;
  map.score_baseline = 0.25;
  map.baseline = "dataset_sample";
  const auto path = std::filesystem::temp_directory_path() / ("rl-attr-" + std::to_string(::getpid()) + ".rlat");
  save_attribution(map, path);
  const auto back = load_attribution(path);
  EXPECT_EQ(back.values, map.values);
  EXPECT_EQ(back.method, map.method);
  EXPECT_EQ(back.target, 2);
  EXPECT_EQ(back.samples, 64);
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.score_input, 0.75);
  EXPECT_EQ(back.baseline, "dataset_sample");
  std::filesystem::remove(path);
  std::filesystem::remove(std::filesystem::path(path).replace_extension(".json"));
}

TEST(Serialization, TruncatedBlockIsAFormatError) {
  auto bytes = encode_attribution(map_of(Tensor<double>({2, 2}, {1, 2, 3, 4})));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RLAT");
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_attribution(bytes), FormatError);
}

TEST(Targets, PolicyResolution) {
  const Tensor<float> row({4}, {0.1f, 2.0f, -1.0f, 0.5f});
  EXPECT_EQ(resolve_target(TargetPolicy::kPredicted, row, 3, 0), 1);
  EXPECT_EQ(resolve_target(TargetPolicy::kLabel, row, 3, 0), 3);
  EXPECT_EQ(resolve_target(TargetPolicy::kExplicit, row, 3, 2), 2);
  EXPECT_THROW(resolve_target(TargetPolicy::kExplicit, row, 3, 4), IndexError);
}

TEST(Targets, SoftmaxScoreIsTargetProbability) {
  const auto net = build_network<double>(testing::micro_spec(8), 15);
  std::mt19937_64 rng(15);
  const auto x = random_tensor<double>({2, 3, 8, 8}, rng, 0, 1);
  const auto logits = forward_logits(net, x);
  const auto p = evaluate_scores(target_score<double>(logits_of(net), 1), x);
  const auto raw = evaluate_scores(target_score<double>(logits_of(net), 1, TargetScore::kLogit), x);
  for (Index n = 0; n < 2; ++n) {
    double z = 0.0;
    for (Index c = 0; c < 4; ++c) z += std::exp(logits[n * 4 + c]);
    EXPECT_NEAR(p[n], std::exp(logits[n * 4 + 1]) / z, 1e-12);
    EXPECT_NEAR(raw[n], logits[n * 4 + 1], 1e-12);
  }
}

TEST(Baselines, PoliciesProduceExpectedTensors) {
  const Tensor<float> x({3, 2, 2}, 0.5f);
  EXPECT_EQ(make_baseline(BaselinePolicy::kZeros, x, nullptr, 0), Tensor<float>({3, 2, 2}));
  const auto noise = make_baseline(BaselinePolicy::kUniformNoise, x, nullptr, 4);
  EXPECT_EQ(noise, make_baseline(BaselinePolicy::kUniformNoise, x, nullptr, 4));
  for (float v : noise.data()) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
  Tensor<float> data({2, 3, 2, 2});
  for (Index i = 12; i < 24; ++i) data[i] = 1.0f;
  const auto sample = make_baseline(BaselinePolicy::kDatasetSample, x, &data, 5);
  EXPECT_TRUE(sample == unstack_one(data, 0) || sample == unstack_one(data, 1));
  EXPECT_THROW(make_baseline(BaselinePolicy::kDatasetSample, x, nullptr, 5), ConfigError);
}

}  // namespace
}  // namespace rl

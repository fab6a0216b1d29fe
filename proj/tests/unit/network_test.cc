#include <gtest/gtest.h>

#include <random>

#include "robustlens/network.h"
#include "test_support.h"

namespace rl {
namespace {

using testing::max_abs_diff;
using testing::max_relative_error;
using testing::random_tensor;

NetworkSpec tiny_basic() {
  NetworkSpec spec;
  spec.height = spec.width = 16;
  spec.num_classes = 4;
  spec.stage_widths = {8, 16};
  spec.blocks_per_stage = {1, 1};
  return spec;
}

// Running statistics and affine parameters away from their initial values,
// so eval-mode batchnorm is not the identity.
template <typename T>
void randomise_batchnorm(Network<T>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 1.5), v(-0.3, 0.3);
  for (const auto& name : net.params.names()) {
    auto& t = net.params.at(name);
    const bool var = name.ends_with("running_var") || name.ends_with("gamma");
    const bool shift = name.ends_with("running_mean") || name.ends_with("beta");
    if (!var && !shift) continue;
    for (auto& x : t.data()) x = static_cast<T>(var ? u(rng) : v(rng));
  }
}

TEST(Build, SameSeedGivesIdenticalStores) {
  EXPECT_EQ(build_network<float>(NetworkSpec::micro_resnet(), 3), build_network<float>(NetworkSpec::micro_resnet(), 3));
  EXPECT_NE(build_network<float>(NetworkSpec::micro_resnet(), 3).params,
            build_network<float>(NetworkSpec::micro_resnet(), 4).params);
}

TEST(Build, ParameterCountMatchesHandDerivation) {
  const auto net = build_network<float>(tiny_basic(), 0);
  // stem: 3x3 conv 3->8 plus batchnorm affine
  const Index stem = 8 * 3 * 9 + 2 * 8;
  // stage1 block: two 3x3 convs 8->8, two batchnorms, identity skip
  const Index stage1 = 2 * (8 * 8 * 9) + 2 * (2 * 8);
  // stage2 block: 3x3 8->16 (stride 2), 3x3 16->16, 1x1 projection 8->16, three batchnorms
  const Index stage2 = 16 * 8 * 9 + 16 * 16 * 9 + 16 * 8 + 3 * (2 * 16);
  const Index fc = 4 * 16 + 4;
  EXPECT_EQ(net.params.parameter_count(), stem + stage1 + stage2 + fc);
  EXPECT_EQ(stem + stage1 + stage2 + fc, 5164);
  // Running mean and variance for each of the 1 + 2 + 3 batchnorms.
  EXPECT_EQ(net.params.parameter_count(false) - net.params.parameter_count(), 2 * (8 + 2 * 8 + 3 * 16));
}

TEST(Build, MicroResnetDefaults) {
  const auto spec = NetworkSpec::micro_resnet();
  EXPECT_EQ(spec.stage_widths, (std::vector<Index>{16, 32, 64}));
  EXPECT_EQ(spec.blocks_per_stage, (std::vector<int>{2, 2, 2}));
  EXPECT_EQ(spec.representation_width(), 64);
  EXPECT_EQ(spec.input_shape(), (Shape{3, 32, 32}));
}

TEST(Build, BottleneckProjectionOnlyWhenShapeChanges) {
  NetworkSpec spec;
  spec.block = BlockType::kBottleneck;
  spec.height = spec.width = 8;
  spec.stage_widths = {4, 8};
  spec.blocks_per_stage = {2, 1};
  const auto net = build_network<float>(spec, 0);
  // stem width 4 -> expanded width 16: projection on the first block.
  ASSERT_TRUE(net.params.contains("stage1.block0.shortcut.conv.weight"));
  EXPECT_EQ(net.params.at("stage1.block0.shortcut.conv.weight").shape(), (Shape{16, 4, 1, 1}));
  // 16 -> 16 at stride 1: identity.
  EXPECT_FALSE(net.params.contains("stage1.block1.shortcut.conv.weight"));
  EXPECT_TRUE(net.params.contains("stage2.block0.shortcut.conv.weight"));
  EXPECT_EQ(net.params.at("stage1.block0.conv3.weight").shape(), (Shape{16, 4, 1, 1}));
  EXPECT_EQ(spec.representation_width(), 32);
  EXPECT_EQ(forward_representation(net, Tensor<float>({2, 3, 8, 8})).shape(), (Shape{2, 32}));
}

TEST(Build, ResNet50IsExpressible) {
  const auto spec = NetworkSpec::resnet50(150);
  EXPECT_EQ(spec.block, BlockType::kBottleneck);
  EXPECT_EQ(spec.blocks_per_stage, (std::vector<int>{3, 4, 6, 3}));
  EXPECT_EQ(spec.representation_width(), 2048);
  EXPECT_EQ(spec.input_shape(), (Shape{3, 128, 128}));
  EXPECT_NO_THROW(spec.validate());
}

TEST(Build, InvalidSpecsAreRejected) {
  auto spec = tiny_basic();
  spec.stage_widths = {8, 0};
  EXPECT_THROW(build_network<float>(spec, 0), ConfigError);
  spec = tiny_basic();
  spec.blocks_per_stage = {1};
  EXPECT_THROW(build_network<float>(spec, 0), ConfigError);
}

TEST(Build, SpecJsonRoundTrip) {
  const auto spec = NetworkSpec::resnet50(10);
  EXPECT_EQ(nlohmann::json(spec).get<NetworkSpec>(), spec);
}

TEST(Forward, FreshNetworkIsFinite) {
  std::mt19937_64 rng(1);
  const auto net = build_network<float>(NetworkSpec::micro_resnet(), 1);
  const auto x = random_tensor<float>({3, 3, 32, 32}, rng, 0, 1);
  for (Mode mode : {Mode::kEval, Mode::kTrain}) {
    for (float v : forward_logits(net, x, mode).data()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Forward, InputShapeMismatchThrows) {
  const auto net = build_network<float>(tiny_basic(), 1);
  EXPECT_THROW(forward_logits(net, Tensor<float>({1, 3, 8, 8})), DimensionError);
  EXPECT_THROW(forward_logits(net, Tensor<float>({1, 1, 16, 16})), DimensionError);
}

TEST(Forward, IdenticalImagesGiveIdenticalRows) {
  std::mt19937_64 rng(2);
  const auto net = build_network<float>(tiny_basic(), 2);
  const auto img = random_tensor<float>({3, 16, 16}, rng, 0, 1);
  const std::vector<Tensor<float>> both{img, img};
  const auto logits = forward_logits(net, stack<float>(both), Mode::kEval);
  for (Index c = 0; c < 4; ++c) EXPECT_EQ(logits[c], logits[4 + c]);
}

TEST(Forward, EvalModeIsBatchSizeInvariant) {
  std::mt19937_64 rng(3);
  auto net = build_network<float>(tiny_basic(), 3);
  randomise_batchnorm(net, 3);
  const auto batch = random_tensor<float>({5, 3, 16, 16}, rng, 0, 1);
  const auto all = forward_logits(net, batch);
  for (Index i = 0; i < 5; ++i) {
    const auto alone = forward_logits(net, as_batch(unstack_one(batch, i)));
    for (Index c = 0; c < 4; ++c) EXPECT_NEAR(alone[c], all[i * 4 + c], 1e-6);
  }
  EXPECT_LE(max_abs_diff(predict_logits(net, batch, 2), all), 1e-6);
}

TEST(Forward, LogitsAreLinearInRepresentation) {
  std::mt19937_64 rng(4);
  auto net = build_network<double>(tiny_basic(), 4);
  randomise_batchnorm(net, 4);
  const auto x = random_tensor<double>({3, 3, 16, 16}, rng, 0, 1);
  const auto r = forward_representation(net, x);
  ASSERT_EQ(r.shape(), (Shape{3, net.spec.representation_width()}));
  const auto logits = forward_logits(net, x);
  const auto& w = net.params.at("fc.weight");
  const auto& b = net.params.at("fc.bias");
  for (Index n = 0; n < 3; ++n) {
    for (Index c = 0; c < 4; ++c) {
      double acc = b[c];
      for (Index k = 0; k < 16; ++k) acc += w[c * 16 + k] * r[n * 16 + k];
      EXPECT_NEAR(logits[n * 4 + c], acc, 1e-6);
    }
  }
}

TEST(Forward, ZeroedResidualBranchesReduceToSkipPath) {
  std::mt19937_64 rng(5);
  auto net = build_network<double>(tiny_basic(), 5);
  randomise_batchnorm(net, 5);
  for (const char* bn : {"stage1.block0.bn2", "stage2.block0.bn2"}) {
    net.params.at(std::string(bn) + ".gamma").fill(0.0);
    net.params.at(std::string(bn) + ".beta").fill(0.0);
  }
  const auto x = random_tensor<double>({2, 3, 16, 16}, rng, 0, 1);

  // Analytic trace: stem, identity block -> relu(stem) = stem, projection
  // block -> relu(bn(conv1x1(stem))), then global average pooling.
  Tape<double> tape;
  auto p = [&](const std::string& name) { return tape.constant(net.params.at(name)); };
  auto bn = [&](const Var<double>& h, const std::string& name) {
    return batchnorm2d(h, p(name + ".gamma"), p(name + ".beta"), std::span<const double>(net.params.at(name + ".running_mean").data()),
                       std::span<const double>(net.params.at(name + ".running_var").data()), BatchNormMode::kEval)
        .output;
  };
  const std::optional<Var<double>> none{};
  auto stem = relu(bn(conv2d(tape.constant(x), p("stem.conv.weight"), none, {1, 1}), "stem.bn"));
  auto block1 = relu(stem);
  auto block2 = relu(bn(conv2d(block1, p("stage2.block0.shortcut.conv.weight"), none, {2, 0}),
                        "stage2.block0.shortcut.bn"));
  const auto expected = global_avg_pool(block2).value();
  EXPECT_LE(max_abs_diff(forward_representation(net, x), expected), 1e-12);
}

TEST(Forward, RepresentationGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  NetworkSpec spec = tiny_basic();
  spec.height = spec.width = 8;
  spec.stage_widths = {4, 8};
  auto net = build_network<double>(spec, 6);
  randomise_batchnorm(net, 6);
  const auto x = random_tensor<double>({2, 3, 8, 8}, rng, 0, 1);
  const auto probe = random_tensor<double>({2, 8}, rng);
  // The network is piecewise linear; a step of 1e-4 straddles ReLU kinks for
  // some pixels at this scale, 1e-5 does not.
  auto loss = [&](const Var<double>& in) {
    auto trace = trace_forward(net, in, Mode::kEval);
    return sum(mul(trace.representation, in.tape().constant(probe)));
  };
  Tape<double> tape;
  auto in = tape.leaf(x, true);
  tape.backward(loss(in));
  const auto numeric = testing::numeric_gradient(
      [&](const Tensor<double>& v) {
        Tape<double> t;
        return loss(t.constant(v)).value()[0];
      },
      x, 1e-5);
  EXPECT_LE(max_relative_error(tape.grad(in), numeric), 1e-3);
}

TEST(Forward, TrainModeParameterGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(8);
  NetworkSpec spec = tiny_basic();
  spec.height = spec.width = 8;
  spec.stage_widths = {4, 8};
  auto net = build_network<double>(spec, 8);
  const auto x = random_tensor<double>({4, 3, 8, 8}, rng, 0, 1);
  const std::vector<int> y{0, 1, 2, 3};
  auto loss_of = [&](const Network<double>& n) {
    Tape<double> t;
    return cross_entropy(trace_forward(n, t.constant(x), Mode::kTrain).logits, y).value()[0];
  };
  Tape<double> tape;
  auto trace = trace_forward(net, tape.constant(x), Mode::kTrain, true);
  tape.backward(cross_entropy(trace.logits, y));
  for (const auto& [name, var] : trace.parameters) {
    auto probe = net;
    const auto numeric = testing::numeric_gradient(
        [&](const Tensor<double>& v) {
          probe.params.at(name) = v;
          return loss_of(probe);
        },
        net.params.at(name), 1e-5);
    EXPECT_LE(max_relative_error(tape.grad(var), numeric), 1e-3) << name;
  }
}

TEST(Forward, TrainModeReportsBatchStatistics) {
  std::mt19937_64 rng(7);
  auto net = build_network<float>(tiny_basic(), 7);
  const auto x = random_tensor<float>({4, 3, 16, 16}, rng, 0, 1);
  Tape<float> tape;
  auto trace = trace_forward(net, tape.constant(x), Mode::kTrain, true);
  EXPECT_EQ(trace.batch_statistics.size(), 6u);
  EXPECT_EQ(trace.parameters.size(), static_cast<std::size_t>(std::count_if(
                                         net.params.begin(), net.params.end(),
                                         [](const auto& e) { return e.second.trainable; })));
  // EMA with momentum m: r <- (1 - m) r + m * batch.
  const auto before = net.params.at("stem.bn.running_mean");
  apply_batch_statistics(net, trace.batch_statistics, 0.1f);
  const auto& stats = *std::find_if(trace.batch_statistics.begin(), trace.batch_statistics.end(),
                                    [](const auto& s) { return s.prefix == "stem.bn"; });
  for (Index c = 0; c < before.size(); ++c) {
    EXPECT_FLOAT_EQ(net.params.at("stem.bn.running_mean")[c], 0.9f * before[c] + 0.1f * stats.mean[c]);
  }
}

}  // namespace
}  // namespace rl

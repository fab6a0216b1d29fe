#include <random>

#include <benchmark/benchmark.h>

#include "robustlens/attacks.h"
#include "robustlens/attributions.h"
#include "robustlens/metrics.h"
#include "robustlens/network.h"
#include "robustlens/parallel.h"

namespace rl {
namespace {

template <typename T>
Tensor<T> uniform(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

NetworkSpec micro(Index size) {
  auto spec = NetworkSpec::micro_resnet(4);
  spec.height = spec.width = size;
  return spec;
}

std::vector<int> labels(Index n) {
  std::vector<int> y;
  for (Index i = 0; i < n; ++i) y.push_back(static_cast<int>(i % 4));
  return y;
}

// 3x3 same-padding convolution, forward and backward, [64,C,S,S] -> [64,C,S,S].
void BM_Conv2dForwardBackward(benchmark::State& state) {
  const Index channels = state.range(0), size = state.range(1);
  const auto x = uniform<float>({64, channels, size, size}, 1);
  const auto w = uniform<float>({channels, channels, 3, 3}, 2);
  for (auto _ : state) {
    Tape<float> tape;
    auto in = tape.leaf(x, true);
    auto kernel = tape.leaf(w, true);
    auto y = conv2d(in, kernel, std::optional<Var<float>>{}, {.stride = 1, .padding = 1});
    tape.backward(sum(y));
    benchmark::DoNotOptimize(tape.grad(kernel).data().data());
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({16, 16})->Args({16, 32})->Args({64, 8})->Unit(benchmark::kMillisecond);

// One training-style pass of the micro-resnet on a 64-image batch.
void BM_MicroResnetForwardBackward(benchmark::State& state) {
  const Index size = state.range(0);
  const auto net = build_network<float>(micro(size), 3);
  const auto x = uniform<float>({64, 3, size, size}, 4);
  const auto y = labels(64);
  for (auto _ : state) {
    Tape<float> tape;
    auto trace = trace_forward(net, tape.constant(x), Mode::kTrain, true);
    tape.backward(cross_entropy(trace.logits, y));
    benchmark::DoNotOptimize(tape.grad(trace.parameters.begin()->second).data().data());
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_MicroResnetForwardBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

// L2 PGD with the default K = 7 on a 64-image batch.
void BM_PgdAttack(benchmark::State& state) {
  const Index size = state.range(0);
  const auto net = build_network<float>(micro(size), 5);
  const auto x = uniform<float>({64, 3, size, size}, 6);
  const auto y = labels(64);
  const AttackConfig config;
  for (auto _ : state) {
    auto result = pgd_attack(net, x, y, config);
    benchmark::DoNotOptimize(result.delta.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_PgdAttack)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

// Frechet distance between two Gaussians of dimension d.
void BM_FrechetDistance(benchmark::State& state) {
  const Index d = state.range(0);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  Eigen::MatrixXd a(2 * d, d), b(2 * d, d);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng), b.data()[i] = g(rng);
  const auto sa = fit_gaussian(a), sb = fit_gaussian(b);
  for (auto _ : state) benchmark::DoNotOptimize(frechet_distance(sa, sb));
}
BENCHMARK(BM_FrechetDistance)->Arg(64)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

// Integrated gradients with m interpolation steps on one 16x16 image.
void BM_IntegratedGradients(benchmark::State& state) {
  const auto net = build_network<double>(micro(16), 8);
  const auto x = uniform<double>({3, 16, 16}, 9);
  const Tensor<double> baseline(x.shape());
  const auto score = target_score<double>(logits_of(net), 0);
  const IgOptions options{.steps = static_cast<int>(state.range(0))};
  for (auto _ : state) {
    auto map = integrated_gradients(score, x, baseline, options);
    benchmark::DoNotOptimize(map.values.data().data());
  }
}
BENCHMARK(BM_IntegratedGradients)->Arg(64)->Arg(512)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace rl

int main(int argc, char** argv) {
  rl::tune_allocator();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <unistd.h>

#include "robustlens/checkpoint.h"
#include "robustlens/dataset.h"
#include "robustlens/network.h"
#include "robustlens/training.h"

namespace rl::testing {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
template <typename T>
double max_relative_error(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return worst;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]));
  return worst;
}

// Central differences of a scalar function of one tensor.
inline Tensor<double> numeric_gradient(const std::function<double(const Tensor<double>&)>& f, Tensor<double> x,
                                       double h = 1e-4) {
  Tensor<double> g(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Reference 2-D convolution by direct summation.
template <typename T>
Tensor<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, Index stride, Index pad) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const Index oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor<T> y({n, o, oh, ow});
  for (Index b = 0; b < n; ++b)
    for (Index oc = 0; oc < o; ++oc)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          double acc = bias ? (*bias)[oc] : 0.0;
          for (Index ic = 0; ic < c; ++ic)
            for (Index u = 0; u < kh; ++u)
              for (Index v = 0; v < kw; ++v) {
                const Index yy = i * stride + u - pad, xx = j * stride + v - pad;
                if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                acc += static_cast<double>(x[((b * c + ic) * h + yy) * wd + xx]) * w[((oc * c + ic) * kh + u) * kw + v];
              }
          y[((b * o + oc) * oh + i) * ow + j] = static_cast<T>(acc);
        }
  return y;
}

// Small labelled set of synthetic shapes.
inline Dataset shapes(Index per_class, Index size, std::uint64_t seed, Split split = Split::kTrain) {
  SyntheticOptions o;
  o.per_class = per_class;
  o.size = size;
  o.seed = seed;
  o.split = split;
  return generate_synthetic(o);
}

inline NetworkSpec micro_spec(Index size, int classes = 4) {
  auto spec = NetworkSpec::micro_resnet(classes);
  spec.height = spec.width = size;
  return spec;
}

// Trained standard micro-resnet on 16x16 shapes, shared by tests that need a
// realistic model. Cached under the test cache directory.
struct TrainedFixture {
  Network<float> network;
  Dataset train_set;
  Dataset test_set;
};

inline std::filesystem::path cache_dir() {
#ifdef ROBUSTLENS_TEST_CACHE
  return ROBUSTLENS_TEST_CACHE;
#else
  return std::filesystem::temp_directory_path() / "robustlens-test-cache";
#endif
}

inline const TrainedFixture& standard_fixture() {
  static const TrainedFixture fixture = [] {
    TrainedFixture f;
    f.train_set = shapes(500, 16, 11);
    f.test_set = shapes(100, 16, 11, Split::kTest);
    const auto path = cache_dir() / "standard16-v1.rlck";
    std::error_code ec;
    if (std::filesystem::exists(path)) {
      f.network = load_checkpoint(path).network;
      return f;
    }
    TrainConfig config;
    config.epochs = 8;
    config.seed = 5;
    auto result = train(build_network<float>(micro_spec(16), 5), f.train_set, f.test_set, config);
    f.network = result.best_network;
    std::filesystem::create_directories(cache_dir(), ec);
    // Rename is atomic, so concurrent test processes never see partial files.
    const auto tmp = path.string() + ".tmp" + std::to_string(::getpid());
    save_checkpoint({f.network, {}}, tmp);
    std::filesystem::rename(tmp, path, ec);
    return f;
  }();
  return fixture;
}

}  // namespace rl::testing

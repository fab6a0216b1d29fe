#pragma once

#include <optional>
#include <span>
#include <vector>

#include "robustlens/tape.h"

namespace rl {

// Differentiable primitives. Every op checks operand shapes eagerly and
// throws DimensionError naming both shapes on mismatch.

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);
template <typename T>
Var<T> relu(const Var<T>& a);
template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);
// [N, ...] -> [N, prod(...)].
template <typename T>
Var<T> flatten(const Var<T>& a);

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
};

// input [N,C,H,W], kernel [O,C,kH,kW], bias [O] (optional).
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const std::optional<Var<T>>& bias,
               Conv2dOptions options = {});

enum class BatchNormMode { kTrain, kEval };

template <typename T>
struct BatchNormResult {
  Var<T> output;
  // Per-channel batch statistics (train mode only; variance is biased).
  std::vector<T> batch_mean;
  std::vector<T> batch_var;
};

// Per-channel normalization of [N,C,H,W]. Train mode uses batch statistics;
// eval mode uses the supplied running statistics.
template <typename T>
BatchNormResult<T> batchnorm2d(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                               std::span<const T> running_mean, std::span<const T> running_var,
                               BatchNormMode mode, T epsilon = T(1e-5));

// x [N,in], weight [out,in], bias [out] (optional).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias);

// Non-overlapping k x k mean pooling of [N,C,H,W].
template <typename T>
Var<T> avg_pool2d(const Var<T>& input, Index kernel);

// [N,C,H,W] -> [N,C].
template <typename T>
Var<T> global_avg_pool(const Var<T>& input);

enum class Reduction { kMean, kSum };

// Softmax cross-entropy of logits [N,C] against integer labels, evaluated
// with the max-shifted log-sum-exp.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels,
                     Reduction reduction = Reduction::kMean);

// Row-wise softmax of [N,C].
template <typename T>
Var<T> softmax(const Var<T>& logits);

// out[n] = x[n, index[n]] for x [N,C].
template <typename T>
Var<T> pick(const Var<T>& x, std::span<const int> index);

// out[n] = ||x[n, ...]||_2 for x [N, ...].
template <typename T>
Var<T> row_l2_norm(const Var<T>& x);

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}
template <typename T>
Var<T> operator*(T factor, const Var<T>& a) {
  return scale(a, factor);
}

// Output extent of a strided window.
inline Index conv_output_extent(Index input, Index kernel, Index stride, Index padding) {
  return (input + 2 * padding - kernel) / stride + 1;
}

}  // namespace rl

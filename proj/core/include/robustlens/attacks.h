#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>

#include "robustlens/network.h"

namespace rl {

enum class Norm { kL2, kLinf };

// How the ascent direction is formed from the loss gradient g.
enum class StepRule {
  kNormalized,  // L2: g/||g||_2, Linf: sign(g)
  kRaw,         // g as-is
};

struct PixelRange {
  double lo = 0.0;
  double hi = 1.0;
};

struct AttackConfig {
  Norm norm = Norm::kL2;
  double epsilon = 0.5;
  double step = 0.1;
  int iterations = 7;
  bool random_init = true;
  std::uint64_t seed = 0;
  StepRule step_rule = StepRule::kNormalized;
  std::optional<PixelRange> clip = PixelRange{};

  void validate() const;
};

const char* norm_name(Norm norm);
Norm parse_norm(const std::string& name);

// Maps [N, ...] inputs to [N, C] logits on the input's tape.
template <typename T>
using LogitsFn = std::function<Var<T>(const Var<T>& input)>;

// Eval-mode logits of `net`.
template <typename T>
LogitsFn<T> logits_of(const Network<T>& net);

// Projection onto the ball of radius `epsilon`, treating the whole tensor as
// one vector. L2 rescales radially; Linf clamps elementwise.
template <typename T>
Tensor<T> project(const Tensor<T>& delta, Norm norm, double epsilon);

// Per-sample projection of a batch along its leading axis.
template <typename T>
Tensor<T> project_rows(const Tensor<T>& delta, Norm norm, double epsilon);

template <typename T>
T norm_of(std::span<const T> values, Norm norm);

// Uniform draw from the ball for every sample of a batch shaped like `shape`.
template <typename T>
Tensor<T> random_ball_init(const Shape& shape, Norm norm, double epsilon, std::mt19937_64& rng);

template <typename T>
struct AttackResult {
  Tensor<T> adversarial;  // clip(x + delta)
  Tensor<T> delta;        // adversarial - x, inside the ball
};

// Mean cross-entropy of `model` on a batch.
template <typename T>
double mean_loss(const LogitsFn<T>& model, const Tensor<T>& x, std::span<const int> labels);

// White-box projected gradient ascent on the summed cross-entropy.
template <typename T>
AttackResult<T> pgd_attack(const LogitsFn<T>& model, const Tensor<T>& x, std::span<const int> labels,
                           const AttackConfig& config);

template <typename T>
AttackResult<T> pgd_attack(const Network<T>& net, const Tensor<T>& x, std::span<const int> labels,
                           const AttackConfig& config) {
  return pgd_attack(logits_of(net), x, labels, config);
}

}  // namespace rl

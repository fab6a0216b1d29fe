#include "robustlens/attacks.h"

#include <algorithm>
#include <cmath>

namespace rl {

void AttackConfig::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("attack epsilon must be > 0");
  if (!(step > 0.0)) throw ConfigError("attack step size must be > 0");
  if (iterations < 1) throw ConfigError("attack needs at least one iteration");
  if (clip && !(clip->lo < clip->hi)) throw ConfigError("attack pixel range is empty");
}

const char* norm_name(Norm norm) { return norm == Norm::kL2 ? "l2" : "linf"; }

Norm parse_norm(const std::string& name) {
  if (name == "l2" || name == "L2") return Norm::kL2;
  if (name == "linf" || name == "Linf" || name == "inf") return Norm::kLinf;
  throw ConfigError("unknown norm '" + name + "' (expected l2 or linf)");
}

template <typename T>
LogitsFn<T> logits_of(const Network<T>& net) {
  return [&net](const Var<T>& input) { return trace_forward(net, input, Mode::kEval).logits; };
}

template <typename T>
T norm_of(std::span<const T> values, Norm norm) {
  T acc{0};
  if (norm == Norm::kL2) {
    for (T v : values) acc += v * v;
    return std::sqrt(acc);
  }
  for (T v : values) acc = std::max(acc, std::abs(v));
  return acc;
}

namespace {

template <typename T>
void project_in_place(std::span<T> delta, Norm norm, double epsilon) {
  const T eps = static_cast<T>(epsilon);
  if (norm == Norm::kLinf) {
    for (T& v : delta) v = std::clamp(v, -eps, eps);
    return;
  }
  const T n = norm_of<T>(delta, Norm::kL2);
  if (n > eps) {
    const T factor = eps / n;
    for (T& v : delta) v *= factor;
  }
}

}  // namespace

template <typename T>
Tensor<T> project(const Tensor<T>& delta, Norm norm, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("projection radius must be > 0");
  Tensor<T> out = delta;
  project_in_place(out.data(), norm, epsilon);
  return out;
}

template <typename T>
Tensor<T> project_rows(const Tensor<T>& delta, Norm norm, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("projection radius must be > 0");
  Tensor<T> out = delta;
  for (Index r = 0; r < out.dim(0); ++r) project_in_place(out.row(r), norm, epsilon);
  return out;
}

template <typename T>
Tensor<T> random_ball_init(const Shape& shape, Norm norm, double epsilon, std::mt19937_64& rng) {
  Tensor<T> delta(shape);
  if (norm == Norm::kLinf) {
    std::uniform_real_distribution<double> u(-epsilon, epsilon);
    for (T& v : delta.data()) v = static_cast<T>(u(rng));
    return delta;
  }
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double dims = static_cast<double>(delta.row_size());
  for (Index r = 0; r < delta.dim(0); ++r) {
    auto row = delta.row(r);
    double sq = 0.0;
    std::vector<double> z(row.size());
    for (double& v : z) {
      v = gauss(rng);
      sq += v * v;
    }
    const double radius = epsilon * std::pow(u(rng), 1.0 / dims);
    const double factor = sq > 0.0 ? radius / std::sqrt(sq) : 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = static_cast<T>(z[i] * factor);
    project_in_place(row, Norm::kL2, epsilon);
  }
  return delta;
}

template <typename T>
AttackResult<T> pgd_attack(const LogitsFn<T>& model, const Tensor<T>& x, std::span<const int> labels,
                           const AttackConfig& config) {
  config.validate();
  if (x.rank() < 1 || static_cast<Index>(labels.size()) != x.dim(0)) {
    throw DimensionError("pgd_attack: " + std::to_string(labels.size()) + " labels for batch " +
                         to_string(x.shape()));
  }
  std::mt19937_64 rng(config.seed);
  Tensor<T> delta = config.random_init ? random_ball_init<T>(x.shape(), config.norm, config.epsilon, rng)
                                       : Tensor<T>::zeros(x.shape());
  const T sigma = static_cast<T>(config.step);
  for (int k = 0; k < config.iterations; ++k) {
    Tape<T> tape;
    Var<T> dv = tape.leaf(delta, true);
    Var<T> loss = cross_entropy(model(tape.constant(x) + dv), labels, Reduction::kSum);
    tape.backward(loss);
    const Tensor<T>& g = tape.grad(dv);
    for (Index r = 0; r < delta.dim(0); ++r) {
      auto d = delta.row(r);
      auto gr = g.row(r);
      if (config.step_rule == StepRule::kRaw) {
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += sigma * gr[i];
      } else if (config.norm == Norm::kLinf) {
        for (std::size_t i = 0; i < d.size(); ++i) {
          d[i] += sigma * static_cast<T>((gr[i] > T{0}) - (gr[i] < T{0}));
        }
      } else {
        const T gn = norm_of<T>(gr, Norm::kL2);
        if (gn == T{0}) continue;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += sigma * gr[i] / gn;
      }
      project_in_place(d, config.norm, config.epsilon);
    }
  }
  AttackResult<T> result{x, Tensor<T>(x.shape())};
  for (Index i = 0; i < x.size(); ++i) {
    T v = x[i] + delta[i];
    if (config.clip) v = std::clamp(v, static_cast<T>(config.clip->lo), static_cast<T>(config.clip->hi));
    result.adversarial[i] = v;
    result.delta[i] = v - x[i];
  }
  return result;
}

template <typename T>
double mean_loss(const LogitsFn<T>& model, const Tensor<T>& x, std::span<const int> labels) {
  Tape<T> tape;
  return static_cast<double>(cross_entropy(model(tape.constant(x)), labels, Reduction::kMean).value()[0]);
}

#define RL_INSTANTIATE_ATTACKS(T)                                                                \
  template LogitsFn<T> logits_of(const Network<T>&);                                             \
  template T norm_of(std::span<const T>, Norm);                                                  \
  template Tensor<T> project(const Tensor<T>&, Norm, double);                                    \
  template Tensor<T> project_rows(const Tensor<T>&, Norm, double);                               \
  template Tensor<T> random_ball_init(const Shape&, Norm, double, std::mt19937_64&);             \
  template AttackResult<T> pgd_attack(const LogitsFn<T>&, const Tensor<T>&, std::span<const int>, \
                                      const AttackConfig&);                                      \
  template double mean_loss(const LogitsFn<T>&, const Tensor<T>&, std::span<const int>);

RL_INSTANTIATE_ATTACKS(float)
RL_INSTANTIATE_ATTACKS(double)

#undef RL_INSTANTIATE_ATTACKS

}  // namespace rl

#include "robustlens/training.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

namespace rl {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{seed, a, b};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

double percent(Index hits, Index total) { return total == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / total; }

}  // namespace

const char* train_mode_name(TrainMode mode) { return mode == TrainMode::kStandard ? "standard" : "adversarial"; }

TrainMode parse_train_mode(const std::string& name) {
  if (name == "standard") return TrainMode::kStandard;
  if (name == "adversarial") return TrainMode::kAdversarial;
  throw ConfigError("unknown training mode '" + name + "' (expected standard or adversarial)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw ConfigError("batchnorm momentum must lie in [0,1]");
  if (mode == TrainMode::kAdversarial && !attack) throw ConfigError("adversarial training requires an attack config");
  if (records_robust() && !attack) throw ConfigError("robust history requires an attack config");
  if (attack) attack->validate();
}

void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = {{"norm", norm_name(c.norm)},
       {"epsilon", c.epsilon},
       {"step", c.step},
       {"iterations", c.iterations},
       {"random_init", c.random_init},
       {"seed", c.seed},
       {"step_rule", c.step_rule == StepRule::kNormalized ? "normalized" : "raw"}};
  j["clip"] = c.clip ? nlohmann::json::array({c.clip->lo, c.clip->hi}) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, AttackConfig& c) {
  AttackConfig d;
  c.norm = parse_norm(j.value("norm", std::string(norm_name(d.norm))));
  c.epsilon = j.value("epsilon", d.epsilon);
  c.step = j.value("step", d.step);
  c.iterations = j.value("iterations", d.iterations);
  c.random_init = j.value("random_init", d.random_init);
  c.seed = j.value("seed", d.seed);
  const auto rule = j.value("step_rule", std::string("normalized"));
  if (rule != "normalized" && rule != "raw") throw ConfigError("unknown step rule '" + rule + "'");
  c.step_rule = rule == "raw" ? StepRule::kRaw : StepRule::kNormalized;
  c.clip = d.clip;
  if (j.contains("clip")) {
    if (j["clip"].is_null()) {
      c.clip.reset();
    } else {
      const auto range = j["clip"].get<std::vector<double>>();
      if (range.size() != 2) throw ConfigError("clip must be [lo, hi] or null");
      c.clip = PixelRange{range[0], range[1]};
    }
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"mode", train_mode_name(c.mode)},
       {"learning_rate", c.learning_rate},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"bn_momentum", c.bn_momentum},
       {"robust_history", c.records_robust()}};
  j["attack"] = c.attack ? nlohmann::json(*c.attack) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.mode = parse_train_mode(j.value("mode", std::string(train_mode_name(d.mode))));
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.bn_momentum = j.value("bn_momentum", d.bn_momentum);
  c.attack.reset();
  if (j.contains("attack") && !j["attack"].is_null()) c.attack = j["attack"].get<AttackConfig>();
  c.robust_history.reset();
  if (j.contains("robust_history") && !j["robust_history"].is_null()) {
    c.robust_history = j["robust_history"].get<bool>();
  }
}

bool EvalReport::operator==(const EvalReport& o) const {
  auto attack_json = [](const std::optional<AttackConfig>& a) { return a ? nlohmann::json(*a) : nlohmann::json(); };
  return samples == o.samples && standard_accuracy == o.standard_accuracy && robust_accuracy == o.robust_accuracy &&
         attack_json(attack) == attack_json(o.attack) && per_class_accuracy == o.per_class_accuracy &&
         per_class_robust_accuracy == o.per_class_robust_accuracy;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"samples", r.samples},
       {"standard_accuracy", r.standard_accuracy},
       {"per_class_accuracy", r.per_class_accuracy}};
  if (r.robust_accuracy) {
    j["robust_accuracy"] = *r.robust_accuracy;
    j["per_class_robust_accuracy"] = r.per_class_robust_accuracy;
    j["attack"] = *r.attack;
  } else {
    j["robust_accuracy"] = nullptr;
  }
}

EvalReport evaluate(const Network<float>& net, const Dataset& data, const std::optional<AttackConfig>& attack,
                    Index chunk) {
  data.validate();
  if (chunk < 1) throw ConfigError("evaluation chunk must be at least 1");
  if (attack) attack->validate();
  const int classes = net.spec.num_classes;
  EvalReport report;
  report.samples = data.size();
  report.attack = attack;
  std::vector<Index> class_total(static_cast<std::size_t>(classes), 0);
  std::vector<Index> class_hits(class_total.size(), 0), class_robust(class_total.size(), 0);
  Index hits = 0, robust_hits = 0;
  for (Index begin = 0, c = 0; begin < data.size(); begin += chunk, ++c) {
    const Index end = std::min(begin + chunk, data.size());
    const auto x = slice_rows(data.images, begin, end);
    const std::span<const int> labels(data.labels.data() + begin, static_cast<std::size_t>(end - begin));
    const auto clean = argmax_rows(forward_logits(net, x, Mode::kEval));
    std::vector<int> adv;
    if (attack) {
      AttackConfig cfg = *attack;
      cfg.seed = mix_seed(attack->seed, 0x65766131, static_cast<std::uint64_t>(c));
      adv = argmax_rows(forward_logits(net, pgd_attack(net, x, labels, cfg).adversarial, Mode::kEval));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto y = static_cast<std::size_t>(labels[i]);
      if (y >= class_total.size()) throw IndexError("label exceeds network class count");
      ++class_total[y];
      if (clean[i] == labels[i]) {
        ++hits;
        ++class_hits[y];
      }
      if (attack && adv[i] == labels[i]) {
        ++robust_hits;
        ++class_robust[y];
      }
    }
  }
  report.standard_accuracy = percent(hits, data.size());
  for (int k = 0; k < classes; ++k) {
    report.per_class_accuracy.push_back(percent(class_hits[static_cast<std::size_t>(k)],
                                                class_total[static_cast<std::size_t>(k)]));
  }
  if (attack) {
    report.robust_accuracy = percent(robust_hits, data.size());
    for (int k = 0; k < classes; ++k) {
      report.per_class_robust_accuracy.push_back(percent(class_robust[static_cast<std::size_t>(k)],
                                                         class_total[static_cast<std::size_t>(k)]));
    }
  }
  return report;
}

double EpochRecord::selection_score(TrainMode mode) const {
  if (mode == TrainMode::kAdversarial && robust_accuracy) return (standard_accuracy + *robust_accuracy) / 2.0;
  return standard_accuracy;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},
       {"train_loss", r.train_loss},
       {"train_acc", r.train_accuracy},
       {"std_acc", r.standard_accuracy}};
  j["robust_acc"] = r.robust_accuracy ? nlohmann::json(*r.robust_accuracy) : nlohmann::json(nullptr);
}

std::string history_jsonl(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  for (const auto& r : history) out << nlohmann::json(r).dump() << '\n';
  return out.str();
}

template <typename T>
void sgd_step(ParameterStore<T>& params, const std::map<std::string, Tensor<T>>& grads, double learning_rate,
              Index batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  for (const auto& [name, g] : grads) {
    if (!params.trainable(name)) throw StateError("gradient supplied for non-trainable tensor '" + name + "'");
    if (g.shape() != params.at(name).shape()) {
      throw DimensionError("gradient for '" + name + "' has shape " + to_string(g.shape()) + ", parameter " +
                           to_string(params.at(name).shape()));
    }
    for (Index i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericError("non-finite gradient in '" + name + "' at element " + std::to_string(i));
      }
    }
  }
  const T scale = static_cast<T>(learning_rate / static_cast<double>(batch_size));
  for (const auto& [name, g] : grads) {
    auto& w = params.at(name);
    for (Index i = 0; i < g.size(); ++i) w[i] -= scale * g[i];
  }
}

TrainResult train(Network<float> net, const Dataset& train_set, const Dataset& validation, const TrainConfig& config,
                  const TrainObserver& observer) {
  config.validate();
  train_set.validate();
  validation.validate();
  if (train_set.size() == 0) throw ConfigError("training set is empty");
  if (train_set.sample_shape() != net.spec.input_shape()) {
    throw DimensionError("training images " + to_string(train_set.sample_shape()) + " do not match network input " +
                         to_string(net.spec.input_shape()));
  }

  TrainResult result;
  result.best_network = net;
  double best_score = -std::numeric_limits<double>::infinity();
  const std::optional<AttackConfig> eval_attack = config.records_robust() ? config.attack : std::nullopt;
  Network<float> last_good = net;
  const Index n = train_set.size();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::mt19937_64 shuffle_rng(mix_seed(config.seed, 0x73687566, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    Index correct = 0;
    bool diverged = false;
    for (Index begin = 0, b = 0; begin < n; begin += config.batch_size, ++b) {
      const Index end = std::min(begin + config.batch_size, n);
      const std::span<const Index> idx(order.data() + begin, static_cast<std::size_t>(end - begin));
      Dataset batch = train_set.subset(idx);
      Tensor<float> x = std::move(batch.images);

      if (config.mode == TrainMode::kAdversarial) {
        AttackConfig cfg = *config.attack;
        cfg.seed = mix_seed(config.attack->seed ^ config.seed, static_cast<std::uint64_t>(epoch),
                            static_cast<std::uint64_t>(b));
        const LogitsFn<float> model = [&net](const Var<float>& input) {
          return trace_forward(net, input, Mode::kTrain).logits;
        };
        auto adv = pgd_attack(model, x, batch.labels, cfg);
        if (observer.on_perturbation) observer.on_perturbation(epoch, b, idx, adv.delta);
        x = std::move(adv.adversarial);
      }

      Tape<float> tape;
      auto trace = trace_forward(net, tape.constant(x), Mode::kTrain, true);
      auto loss = cross_entropy(trace.logits, batch.labels, Reduction::kSum);
      const double batch_loss = loss.value()[0];
      if (!std::isfinite(batch_loss)) {
        result.message = "loss became non-finite in epoch " + std::to_string(epoch) + ", batch " + std::to_string(b);
        diverged = true;
        break;
      }
      const auto predicted = argmax_rows(trace.logits.value());
      for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == batch.labels[i] ? 1 : 0;
      loss_sum += batch_loss;

      tape.backward(loss);
      std::map<std::string, Tensor<float>> grads;
      for (const auto& [name, var] : trace.parameters) grads.emplace(name, tape.grad(var));
      try {
        sgd_step(net.params, grads, config.learning_rate, end - begin);
      } catch (const NumericError& e) {
        result.message = std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + ")";
        diverged = true;
        break;
      }
      apply_batch_statistics(net, trace.batch_statistics, static_cast<float>(config.bn_momentum));
    }

    if (diverged) {
      spdlog::error("training diverged: {}", result.message);
      result.status = TrainStatus::kDiverged;
      result.final_network = std::move(last_good);
      return result;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(n);
    record.train_accuracy = percent(correct, n);
    const auto report = evaluate(net, validation, eval_attack);
    record.standard_accuracy = report.standard_accuracy;
    record.robust_accuracy = report.robust_accuracy;
    result.history.push_back(record);
    if (observer.on_epoch) observer.on_epoch(record);
    spdlog::info("epoch {} loss {:.4f} train {:.2f}% std {:.2f}%{}", epoch, record.train_loss, record.train_accuracy,
                 record.standard_accuracy,
                 record.robust_accuracy ? fmt::format(" robust {:.2f}%", *record.robust_accuracy) : std::string());

    const double score = record.selection_score(config.mode);
    if (score > best_score) {
      best_score = score;
      result.best_epoch = epoch;
      result.best_network = net;
    }
    last_good = net;
  }
  result.final_network = std::move(net);
  return result;
}

template void sgd_step(ParameterStore<float>&, const std::map<std::string, Tensor<float>>&, double, Index);
template void sgd_step(ParameterStore<double>&, const std::map<std::string, Tensor<double>>&, double, Index);

}  // namespace rl

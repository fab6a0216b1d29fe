#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "robustlens/attacks.h"
#include "robustlens/dataset.h"
#include "robustlens/network.h"

namespace rl {

enum class TrainMode { kStandard, kAdversarial };

const char* train_mode_name(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);

struct TrainConfig {
  TrainMode mode = TrainMode::kStandard;
  double learning_rate = 0.05;
  int epochs = 30;
  Index batch_size = 64;
  std::uint64_t seed = 0;
  // Inner maximisation for adversarial mode; also the per-epoch robust
  // evaluation attack when present.
  std::optional<AttackConfig> attack;
  double bn_momentum = 0.1;
  // Robust accuracy on the validation set after every epoch. Defaults to on
  // in adversarial mode, where best-model selection needs it.
  std::optional<bool> robust_history;

  void validate() const;
  bool records_robust() const { return robust_history.value_or(mode == TrainMode::kAdversarial); }
};

void to_json(nlohmann::json& j, const AttackConfig& config);
void from_json(const nlohmann::json& j, AttackConfig& config);
void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

struct EvalReport {
  Index samples = 0;
  double standard_accuracy = 0.0;  // percent
  std::optional<double> robust_accuracy;
  std::optional<AttackConfig> attack;
  std::vector<double> per_class_accuracy;
  std::vector<double> per_class_robust_accuracy;

  bool operator==(const EvalReport&) const;
};

void to_json(nlohmann::json& j, const EvalReport& report);

// Standard accuracy, and robust accuracy on PGD outputs when `attack` is
// given. Attacks run `chunk` images at a time with a seed offset per chunk.
EvalReport evaluate(const Network<float>& net, const Dataset& data, const std::optional<AttackConfig>& attack,
                    Index chunk = 128);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double standard_accuracy = 0.0;
  std::optional<double> robust_accuracy;

  // (standard + robust) / 2 when robust is recorded, else standard.
  double selection_score(TrainMode mode) const;
  bool operator==(const EpochRecord&) const = default;
};

void to_json(nlohmann::json& j, const EpochRecord& record);
std::string history_jsonl(const std::vector<EpochRecord>& history);

enum class TrainStatus { kCompleted, kDiverged };

struct TrainResult {
  Network<float> final_network;
  Network<float> best_network;
  int best_epoch = 0;  // 0 = initial weights
  std::vector<EpochRecord> history;
  TrainStatus status = TrainStatus::kCompleted;
  std::string message;
};

// Instrumentation. `on_perturbation` sees every adversarial batch before the
// weight update.
struct TrainObserver {
  std::function<void(int epoch, Index batch, std::span<const Index> indices, const Tensor<float>& delta)>
      on_perturbation;
  std::function<void(const EpochRecord&)> on_epoch;
};

// W <- W - (alpha / batch_size) * g for every trainable tensor in `grads`,
// where g is the gradient of the batch-summed loss. Non-finite gradients
// throw NumericError naming the tensor; nothing is updated in that case.
template <typename T>
void sgd_step(ParameterStore<T>& params, const std::map<std::string, Tensor<T>>& grads, double learning_rate,
              Index batch_size);

// Mini-batch SGD. Standard mode fits clean batches; adversarial mode replaces
// each batch by fresh PGD examples (train-mode batch statistics) before the
// update. Evaluates on `validation` after each epoch and keeps the best
// network by selection score.
TrainResult train(Network<float> net, const Dataset& train_set, const Dataset& validation, const TrainConfig& config,
                  const TrainObserver& observer = {});

}  // namespace rl

#include <iostream>

#include <spdlog/spdlog.h>

#include "cli_common.h"
#include "robustlens/image_io.h"
#include "robustlens/training.h"

namespace rl::cli {

namespace {

nlohmann::json attack_defaults() { return AttackConfig{}; }

NetworkSpec network_for(const nlohmann::json& config, const Dataset& data) {
  NetworkSpec spec = config.contains("network") ? config.at("network").get<NetworkSpec>()
                                                : NetworkSpec::micro_resnet(data.num_classes());
  const Shape shape = data.sample_shape();
  spec.channels = shape.at(0);
  spec.height = shape.at(1);
  spec.width = shape.at(2);
  spec.num_classes = data.num_classes();
  spec.validate();
  return spec;
}

std::optional<AttackConfig> attack_from(const nlohmann::json& config) {
  if (!config.contains("attack") || config.at("attack").is_null()) return std::nullopt;
  try {
    auto attack = config.at("attack").get<AttackConfig>();
    attack.validate();
    return attack;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid attack config: ") + e.what());
  }
}

void run_train(const nlohmann::json& config) {
  RunDirectory run(require_path(config, "/out"));
  const Dataset train_set = load_data(require_path(config, "/train_data"), &run);
  const Dataset validation = load_data(require_path(config, "/val_data"), &run);

  TrainConfig tc;
  try {
    tc = config.at("training").get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  tc.seed = get<std::uint64_t>(config, "/seed");
  tc.attack = attack_from(config);
  tc.validate();

  const NetworkSpec spec = network_for(config, train_set);
  const auto init_seed = config.value("init_seed", tc.seed);
  TrainResult result = train(build_network<float>(spec, init_seed), train_set, validation, tc);

  const nlohmann::json meta = {{"training", tc}, {"init_seed", init_seed}, {"train_data", train_set.hash()},
                               {"val_data", validation.hash()}};
  auto save = [&](const std::string& stem, const Network<float>& net, int epoch) {
    nlohmann::json m = meta;
    m["epoch"] = epoch;
    const auto path = run.claim(stem, ".rlck");
    save_checkpoint({net, m}, path);
    run.record_output(path);
    return path;
  };
  const int last_epoch = result.history.empty() ? 0 : result.history.back().epoch;
  save("final", result.final_network, last_epoch);
  const auto best_path = save("best", result.best_network, result.best_epoch);
  write_text(run, "history", ".jsonl", history_jsonl(result.history));

  const auto report = evaluate(result.best_network, validation, tc.attack);
  nlohmann::json notes = {{"status", result.status == TrainStatus::kCompleted ? "completed" : "diverged"},
                          {"best_epoch", result.best_epoch},
                          {"best_evaluation", report}};
  if (!result.message.empty()) notes["message"] = result.message;
  finish(run, "train", config, notes);
  std::cout << best_path.string() << '\n';
  if (result.status == TrainStatus::kDiverged) throw NumericError(result.message);
}

void run_eval(const nlohmann::json& config) {
  RunDirectory run(require_path(config, "/out"));
  const Checkpoint model = load_model(require_path(config, "/model"), &run);
  const Dataset data = load_data(require_path(config, "/data"), &run);
  auto attack = attack_from(config);
  if (attack) attack->seed = get<std::uint64_t>(config, "/seed");
  const auto report = evaluate(model.network, data, attack);
  const nlohmann::json j = report;
  write_text(run, "report", ".json", j.dump(2) + "\n");
  finish(run, "eval", config);
  std::cout << j.dump(2) << '\n';
}

// Misclassification rate of `images` under the model.
double error_rate(const Network<float>& net, const Tensor<float>& images, std::span<const int> labels) {
  const auto predicted = argmax_rows(predict_logits(net, images));
  Index wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) wrong += predicted[i] != labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(labels.size());
}

void run_attack(const nlohmann::json& config) {
  RunDirectory run(require_path(config, "/out"));
  const Checkpoint model = load_model(require_path(config, "/model"), &run);
  Dataset data = load_data(require_path(config, "/data"), &run);
  const auto limit = config.value("limit", Index{0});
  if (limit > 0 && limit < data.size()) data = data.head(limit);
  auto attack = attack_from(config);
  if (!attack) throw ConfigError("attack config is required");
  attack->seed = get<std::uint64_t>(config, "/seed");

  const auto result = pgd_attack(model.network, data.images, data.labels, *attack);
  std::mt19937_64 rng(attack->seed ^ 0x72616e646f6dULL);
  // Random perturbation on the sphere of the same radius.
  Tensor<float> random = random_ball_init<float>(data.images.shape(), attack->norm, attack->epsilon, rng);
  const Index row = numel(data.sample_shape());
  for (Index i = 0; i < data.size(); ++i) {
    auto r = random.data().subspan(static_cast<std::size_t>(i * row), static_cast<std::size_t>(row));
    const double norm = norm_of<float>(r, attack->norm);
    for (auto& v : r) {
      if (attack->norm == Norm::kLinf) {
        v = v >= 0.0f ? static_cast<float>(attack->epsilon) : static_cast<float>(-attack->epsilon);
      } else if (norm > 0.0) {
        v = static_cast<float>(v * attack->epsilon / norm);
      }
    }
  }
  Tensor<float> noisy = data.images;
  for (Index i = 0; i < noisy.size(); ++i) {
    float v = noisy[i] + random[i];
    if (attack->clip) v = std::clamp(v, static_cast<float>(attack->clip->lo), static_cast<float>(attack->clip->hi));
    noisy[i] = v;
  }

  const double clean_error = error_rate(model.network, data.images, data.labels);
  const double attack_success = error_rate(model.network, result.adversarial, data.labels);
  const double random_success = error_rate(model.network, noisy, data.labels);
  Dataset adversarial = data;
  adversarial.images = result.adversarial;
  const auto set_path = run.claim("adversarial", ".bin");
  save_dataset(adversarial, set_path);
  run.record_output(set_path);
  auto sidecar = set_path;
  run.record_output(sidecar.replace_extension(".json"));

  const nlohmann::json report = {{"samples", data.size()},
                                 {"attack", *attack},
                                 {"clean_error", clean_error},
                                 {"attack_success_rate", attack_success},
                                 {"random_success_rate", random_success},
                                 {"mean_clean_loss", mean_loss(logits_of(model.network), data.images, data.labels)},
                                 {"mean_adversarial_loss",
                                  mean_loss(logits_of(model.network), result.adversarial, data.labels)}};
  write_text(run, "attack_report", ".json", report.dump(2) + "\n");

  const Index shown = std::min<Index>(data.size(), 8);
  std::vector<Tensor<float>> tiles;
  for (Index i = 0; i < shown; ++i) tiles.push_back(data.image(i));
  for (Index i = 0; i < shown; ++i) tiles.push_back(unstack_one(result.adversarial, i));
  write_image(run, "clean_vs_adversarial", tile_images(stack<float>(tiles), shown));
  finish(run, "attack", config);
  std::cout << report.dump(2) << '\n';
}

}  // namespace

void register_train_commands(CLI::App& root, CommandList& commands) {
  auto train_cmd = std::make_unique<Command>(root, "train", "Train a classifier (standard or adversarial)",
                                             nlohmann::json{{"training", TrainConfig{}},
                                                            {"attack", attack_defaults()},
                                                            {"seed", 0},
                                                            {"out", "runs/train"}});
  train_cmd->flag<std::string>("--train-data", "/train_data", "Training record file")->required();
  train_cmd->flag<std::string>("--val-data", "/val_data", "Validation record file")->required();
  train_cmd->flag<std::string>("--mode", "/training/mode", "standard or adversarial");
  train_cmd->flag<int>("--epochs", "/training/epochs", "Epochs");
  train_cmd->flag<double>("--lr", "/training/learning_rate", "Learning rate");
  train_cmd->flag<Index>("--batch-size", "/training/batch_size", "Mini-batch size");
  train_cmd->flag<double>("--epsilon", "/attack/epsilon", "Perturbation radius");
  train_cmd->flag<double>("--step", "/attack/step", "PGD step size");
  train_cmd->flag<int>("--iterations", "/attack/iterations", "PGD iterations");
  train_cmd->flag<std::string>("--norm", "/attack/norm", "l2 or linf");
  train_cmd->flag<std::uint64_t>("--init-seed", "/init_seed", "Weight initialisation seed (defaults to --seed)");
  train_cmd->flag<std::string>("--out", "/out", "Run directory");
  train_cmd->on_run(run_train);
  commands.push_back(std::move(train_cmd));

  auto eval = std::make_unique<Command>(root, "eval", "Standard and robust accuracy of a checkpoint",
                                        nlohmann::json{{"attack", attack_defaults()}, {"seed", 0}, {"out", "runs/eval"}});
  eval->flag<std::string>("--model", "/model", "Checkpoint")->required();
  eval->flag<std::string>("--data", "/data", "Record file")->required();
  eval->flag<double>("--epsilon", "/attack/epsilon", "Perturbation radius");
  eval->flag<double>("--step", "/attack/step", "PGD step size");
  eval->flag<int>("--iterations", "/attack/iterations", "PGD iterations");
  eval->flag<std::string>("--norm", "/attack/norm", "l2 or linf");
  eval->toggle("--no-attack", "/attack", false, "Standard accuracy only");
  eval->flag<std::string>("--out", "/out", "Run directory");
  eval->on_run([](nlohmann::json config) {
    if (config.at("attack").is_boolean()) config["attack"] = nullptr;
    run_eval(config);
  });
  commands.push_back(std::move(eval));

  auto attack = std::make_unique<Command>(root, "attack", "Craft PGD adversarial examples for a dataset",
                                          nlohmann::json{{"attack", attack_defaults()},
                                                         {"limit", 256},
                                                         {"seed", 0},
                                                         {"out", "runs/attack"}});
  attack->flag<std::string>("--model", "/model", "Checkpoint")->required();
  attack->flag<std::string>("--data", "/data", "Record file")->required();
  attack->flag<Index>("--limit", "/limit", "Attack only the first N samples (0 = all)");
  attack->flag<double>("--epsilon", "/attack/epsilon", "Perturbation radius");
  attack->flag<double>("--step", "/attack/step", "PGD step size");
  attack->flag<int>("--iterations", "/attack/iterations", "PGD iterations");
  attack->flag<std::string>("--norm", "/attack/norm", "l2 or linf");
  attack->flag<std::string>("--out", "/out", "Run directory");
  attack->on_run(run_attack);
  commands.push_back(std::move(attack));
}

}  // namespace rl::cli

#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "robustlens/checkpoint.h"
#include "robustlens/dataset.h"
#include "robustlens/manifest.h"

namespace rl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

// One subcommand: defaults, a --config file and explicit flags are merged
// (in that order of increasing precedence) into the JSON handed to `run`.
class Command {
 public:
  Command(CLI::App& parent, const std::string& name, const std::string& description, nlohmann::json defaults);

  CLI::App& app() { return *app_; }
  const std::string& path() const { return path_; }

  // Flag bound to a JSON pointer, e.g. flag<double>("--epsilon", "/attack/epsilon", "...").
  template <typename T>
  CLI::Option* flag(const std::string& name, const std::string& pointer, const std::string& description) {
    auto value = std::make_shared<T>();
    auto* opt = app_->add_option(name, *value, description);
    overrides_.push_back([opt, value, pointer](nlohmann::json& j) {
      if (opt->count() > 0) j[nlohmann::json::json_pointer(pointer)] = *value;
    });
    return opt;
  }
  // Boolean switch bound to a JSON pointer.
  CLI::Option* toggle(const std::string& name, const std::string& pointer, bool value, const std::string& description);

  void on_run(std::function<void(const nlohmann::json& config)> fn) { run_ = std::move(fn); }
  bool parsed() const { return app_->parsed(); }
  nlohmann::json resolve() const;
  void run(const nlohmann::json& config) const { run_(config); }

 private:
  CLI::App* app_;
  std::string path_;
  nlohmann::json defaults_;
  std::string config_file_;
  std::vector<std::function<void(nlohmann::json&)>> overrides_;
  std::function<void(const nlohmann::json&)> run_;
};

using CommandList = std::vector<std::unique_ptr<Command>>;

void register_data_commands(CLI::App& root, CommandList& commands);
void register_train_commands(CLI::App& root, CommandList& commands);
void register_explain_commands(CLI::App& root, CommandList& commands);
void register_viz_commands(CLI::App& root, CommandList& commands);
void register_metric_commands(CLI::App& root, CommandList& commands);

// Typed access with a config error naming the key.
template <typename T>
T get(const nlohmann::json& config, const std::string& key) {
  try {
    return config.at(nlohmann::json::json_pointer(key)).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("missing or invalid config value " + key);
  }
}

std::string require_path(const nlohmann::json& config, const std::string& key);

// Dataset from a record file (with sidecar); records the input hash.
Dataset load_data(const std::string& path, RunDirectory* run);
Checkpoint load_model(const std::string& path, RunDirectory* run);

// [N,3,H,W] from a directory of .ppm files (sorted by name), a single .ppm,
// or a dataset record file.
Tensor<float> load_image_set(const std::string& path, RunDirectory* run);

// Writes `text` to a fresh file in the run directory and records it.
std::filesystem::path write_text(RunDirectory& run, const std::string& stem, const std::string& extension,
                                 const std::string& text);
std::filesystem::path write_image(RunDirectory& run, const std::string& stem, const Tensor<float>& image);

// Upscales small images by pixel replication for viewing.
Tensor<float> enlarge(const Tensor<float>& image, Index factor);

void finish(RunDirectory& run, const std::string& command, const nlohmann::json& config,
            nlohmann::json notes = nlohmann::json::object());

}  // namespace rl::cli

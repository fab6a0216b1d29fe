#include "cli_common.h"

#include <algorithm>
#include <fstream>

#include <spdlog/spdlog.h>

#include "robustlens/image_io.h"

namespace rl::cli {

Command::Command(CLI::App& parent, const std::string& name, const std::string& description, nlohmann::json defaults)
    : app_(parent.add_subcommand(name, description)), defaults_(std::move(defaults)) {
  path_ = parent.get_parent() != nullptr ? parent.get_name() + " " + name : name;
  app_->add_option("--config", config_file_, "JSON config file; flags take precedence")->check(CLI::ExistingFile);
  flag<std::uint64_t>("--seed", "/seed", "Seed overriding the config seed");
}

CLI::Option* Command::toggle(const std::string& name, const std::string& pointer, bool value,
                             const std::string& description) {
  auto* opt = app_->add_flag(name, description);
  overrides_.push_back([opt, pointer, value](nlohmann::json& j) {
    if (opt->count() > 0) j[nlohmann::json::json_pointer(pointer)] = value;
  });
  return opt;
}

nlohmann::json Command::resolve() const {
  nlohmann::json config = defaults_;
  if (!config_file_.empty()) {
    std::ifstream in(config_file_);
    try {
      config.merge_patch(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(config_file_ + ": " + e.what());
    }
  }
  for (const auto& apply : overrides_) apply(config);
  return config;
}

namespace {

void require_exists(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("input not found: " + path);
}

}  // namespace

std::string require_path(const nlohmann::json& config, const std::string& key) {
  const auto value = config.value(nlohmann::json::json_pointer(key), std::string());
  if (value.empty()) throw ConfigError("config value " + key + " is required");
  return value;
}

Dataset load_data(const std::string& path, RunDirectory* run) {
  require_exists(path);
  Dataset data = load_dataset(path);
  if (run) run->record_input(path);
  return data;
}

Checkpoint load_model(const std::string& path, RunDirectory* run) {
  require_exists(path);
  Checkpoint ckpt = load_checkpoint(path);
  if (run) run->record_input(path);
  return ckpt;
}

Tensor<float> load_image_set(const std::string& path, RunDirectory* run) {
  namespace fs = std::filesystem;
  require_exists(path);
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError("no .ppm images in " + path);
    std::vector<Tensor<float>> images;
    for (const auto& f : files) {
      images.push_back(read_ppm(f));
      if (run) run->record_input(f);
    }
    return stack<float>(images);
  }
  if (fs::path(path).extension() == ".ppm") {
    if (run) run->record_input(path);
    return as_batch(read_ppm(path));
  }
  return load_data(path, run).images;
}

std::filesystem::path write_text(RunDirectory& run, const std::string& stem, const std::string& extension,
                                 const std::string& text) {
  const auto path = run.claim(stem, extension);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  out.close();
  run.record_output(path);
  return path;
}

std::filesystem::path write_image(RunDirectory& run, const std::string& stem, const Tensor<float>& image) {
  const auto path = run.claim(stem, ".ppm");
  write_ppm(image, path);
  run.record_output(path);
  return path;
}

Tensor<float> enlarge(const Tensor<float>& image, Index factor) {
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<float> out({c, h * factor, w * factor});
  for (Index ch = 0; ch < c; ++ch) {
    for (Index y = 0; y < h * factor; ++y) {
      for (Index x = 0; x < w * factor; ++x) {
        out[(ch * h * factor + y) * w * factor + x] = image[(ch * h + y / factor) * w + x / factor];
      }
    }
  }
  return out;
}

void finish(RunDirectory& run, const std::string& command, const nlohmann::json& config, nlohmann::json notes) {
  RunManifest manifest;
  manifest.command = command;
  manifest.config = config;
  manifest.seed = config.value("seed", std::uint64_t{0});
  notes["pixel_space"] = "raw [0,1], no per-channel normalisation";
  manifest.notes = std::move(notes);
  const auto path = run.write_manifest(std::move(manifest));
  spdlog::info("manifest written to {}", path.string());
}

}  // namespace rl::cli

#include <iostream>

#include <spdlog/spdlog.h>

#include "cli_common.h"
#include "robustlens/metrics.h"

namespace rl::cli {

namespace {

// Features of an image source, or a stored feature set (.feat).
Eigen::MatrixXd features_of(const std::string& path, const FeatureExtractor* extractor, RunDirectory& run) {
  if (std::filesystem::path(path).extension() == ".feat") {
    run.record_input(path);
    return read_feature_set(path);
  }
  if (extractor == nullptr) throw ConfigError("image inputs need --extractor");
  return extractor->features(load_image_set(path, &run));
}

std::unique_ptr<FeatureExtractor> extractor_from(const nlohmann::json& config, RunDirectory& run) {
  const auto path = config.value("extractor", std::string());
  if (path.empty()) return nullptr;
  const Checkpoint ckpt = load_model(path, &run);
  return std::make_unique<FeatureExtractor>(ckpt.network, config.value("extractor_id", path));
}

void run_fid(const nlohmann::json& config) {
  RunDirectory run(require_path(config, "/out"));
  const auto extractor = extractor_from(config, run);
  const auto real = features_of(require_path(config, "/real"), extractor.get(), run);
  const auto generated = features_of(require_path(config, "/gen"), extractor.get(), run);
  const auto report = fid_from_features(real, generated);
  if (config.value("save_features", false)) {
    for (const auto& [stem, m] : {std::pair{"real", &real}, std::pair{"generated", &generated}}) {
      const auto path = run.claim(stem, ".feat");
      write_feature_set(*m, path);
      run.record_output(path);
    }
  }
  const nlohmann::json result = {{"fid", report.value},
                                 {"real_count", report.real_count},
                                 {"generated_count", report.generated_count},
                                 {"dim", report.dim},
                                 {"clamped_eigenvalues", report.clamped_eigenvalues},
                                 {"extractor", extractor ? extractor->id() : std::string("stored features")}};
  write_text(run, "fid", ".json", result.dump(2) + "\n");
  finish(run, "fid", config, result);
  std::cout << result.dump(2) << '\n';
}

void run_featdist(const nlohmann::json& config) {
  RunDirectory run(require_path(config, "/out"));
  const auto extractor = extractor_from(config, run);
  if (!extractor) throw ConfigError("featdist needs --extractor");
  const auto a = load_image_set(require_path(config, "/a"), &run);
  const auto b = load_image_set(require_path(config, "/b"), &run);
  if (a.shape() != b.shape()) {
    throw DimensionError("image sets differ in shape: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const auto fa = extractor->features(a);
  const auto fb = extractor->features(b);
  std::vector<double> distances;
  for (Index i = 0; i < fa.rows(); ++i) distances.push_back((fa.row(i) - fb.row(i)).norm());
  double mean = 0.0;
  for (double d : distances) mean += d;
  mean /= static_cast<double>(distances.size());
  const nlohmann::json result = {{"mean_l2", mean}, {"distances", distances}, {"extractor", extractor->id()}};
  write_text(run, "featdist", ".json", result.dump(2) + "\n");
  finish(run, "featdist", config, result);
  std::cout << result.dump(2) << '\n';
}

}  // namespace

void register_metric_commands(CLI::App& root, CommandList& commands) {
  auto fid_cmd = std::make_unique<Command>(root, "fid", "Frechet distance between two image sets in feature space",
                                           nlohmann::json{{"seed", 0}, {"out", "runs/fid"}});
  fid_cmd->flag<std::string>("--real", "/real", "Directory of .ppm, single .ppm, record file or .feat")->required();
  fid_cmd->flag<std::string>("--gen", "/gen", "Directory of .ppm, single .ppm, record file or .feat")->required();
  fid_cmd->flag<std::string>("--extractor", "/extractor", "Checkpoint of the feature extractor network");
  fid_cmd->flag<std::string>("--extractor-id", "/extractor_id", "Version label recorded with the score");
  fid_cmd->toggle("--save-features", "/save_features", true, "Write both feature sets as .feat files");
  fid_cmd->flag<std::string>("--out", "/out", "Run directory");
  fid_cmd->on_run(run_fid);
  commands.push_back(std::move(fid_cmd));

  auto dist = std::make_unique<Command>(root, "featdist", "Per-pair feature-space L2 between two aligned image sets",
                                        nlohmann::json{{"seed", 0}, {"out", "runs/featdist"}});
  dist->flag<std::string>("--a", "/a", "First image set")->required();
  dist->flag<std::string>("--b", "/b", "Second image set, same order")->required();
  dist->flag<std::string>("--extractor", "/extractor", "Checkpoint of the feature extractor network")->required();
  dist->flag<std::string>("--extractor-id", "/extractor_id", "Version label");
  dist->flag<std::string>("--out", "/out", "Run directory");
  dist->on_run(run_featdist);
  commands.push_back(std::move(dist));
}

}  // namespace rl::cli

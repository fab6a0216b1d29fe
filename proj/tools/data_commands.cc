#include <iostream>

#include <spdlog/spdlog.h>

#include "cli_common.h"
#include "robustlens/image_io.h"

namespace rl::cli {

namespace {

nlohmann::json describe(const Dataset& data) {
  std::vector<Index> counts(static_cast<std::size_t>(data.num_classes()), 0);
  for (int label : data.labels) ++counts[static_cast<std::size_t>(label)];
  nlohmann::json per_class = nlohmann::json::object();
  for (int c = 0; c < data.num_classes(); ++c) per_class[data.class_names[static_cast<std::size_t>(c)]] = counts[c];
  return {{"count", data.size()},
          {"sample_shape", data.sample_shape()},
          {"split", split_name(data.split)},
          {"classes", per_class},
          {"sha256", data.hash()}};
}

void run_synth(const nlohmann::json& config) {
  SyntheticOptions options;
  options.classes = get<int>(config, "/classes");
  options.per_class = get<Index>(config, "/per_class");
  options.size = get<Index>(config, "/size");
  options.seed = get<std::uint64_t>(config, "/seed");
  options.noise = get<double>(config, "/noise");
  const auto split = get<std::string>(config, "/split");
  if (split != "train" && split != "test") throw ConfigError("split must be train or test");
  options.split = split == "train" ? Split::kTrain : Split::kTest;

  RunDirectory run(require_path(config, "/out"));
  const Dataset data = generate_synthetic(options);
  const auto stem = config.value("name", std::string("synthetic_") + split);
  const auto path = run.claim(stem, ".bin");
  save_dataset(data, path);
  run.record_output(path);
  auto sidecar = path;
  run.record_output(sidecar.replace_extension(".json"));
  const Index preview = std::min<Index>(data.size(), 64);
  write_image(run, stem + "_preview", tile_images(slice_rows(data.images, 0, preview), 8));
  finish(run, "dataset synth", config, {{"dataset", describe(data)}});
  std::cout << path.string() << '\n';
}

void run_inspect(const nlohmann::json& config) {
  RunDirectory run(require_path(config, "/out"));
  const auto path = require_path(config, "/data");
  if (!std::filesystem::exists(path)) throw ConfigError("input not found: " + path);
  const auto format = get<std::string>(config, "/format");
  Dataset data;
  if (format == "cifar10") {
    data = load_cifar10(path);
    run.record_input(path);
  } else if (format == "records") {
    data = load_data(path, &run);
  } else {
    throw ConfigError("format must be records or cifar10");
  }
  const auto summary = describe(data);
  write_text(run, "summary", ".json", summary.dump(2) + "\n");
  finish(run, "dataset inspect", config, {{"dataset", summary}});
  std::cout << summary.dump(2) << '\n';
}

}  // namespace

void register_data_commands(CLI::App& root, CommandList& commands) {
  auto* group = root.add_subcommand("dataset", "Create or inspect datasets");
  group->require_subcommand(1);

  auto synth = std::make_unique<Command>(*group, "synth", "Generate the synthetic shapes dataset",
                                         nlohmann::json{{"classes", 4},
                                                        {"per_class", 500},
                                                        {"size", 32},
                                                        {"noise", 0.08},
                                                        {"split", "train"},
                                                        {"seed", 0},
                                                        {"out", "runs/dataset"}});
  synth->flag<int>("--classes", "/classes", "Number of shape classes (1-6)");
  synth->flag<Index>("--per-class", "/per_class", "Images per class");
  synth->flag<Index>("--size", "/size", "Image side length in pixels");
  synth->flag<double>("--noise", "/noise", "Background noise standard deviation");
  synth->flag<std::string>("--split", "/split", "train or test");
  synth->flag<std::string>("--name", "/name", "Output file stem");
  synth->flag<std::string>("--out", "/out", "Run directory");
  synth->on_run(run_synth);
  commands.push_back(std::move(synth));

  auto inspect = std::make_unique<Command>(*group, "inspect", "Summarise a dataset file",
                                           nlohmann::json{{"format", "records"}, {"seed", 0}, {"out", "runs/inspect"}});
  inspect->flag<std::string>("--data", "/data", "Record file (with .json sidecar) or CIFAR-10 batch")->required();
  inspect->flag<std::string>("--format", "/format", "records or cifar10");
  inspect->flag<std::string>("--out", "/out", "Run directory");
  inspect->on_run(run_inspect);
  commands.push_back(std::move(inspect));
}

}  // namespace rl::cli

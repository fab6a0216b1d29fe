#include <iostream>
#include <random>

#include <spdlog/spdlog.h>

#include "cli_common.h"
#include "robustlens/featureviz.h"
#include "robustlens/image_io.h"

namespace rl::cli {

namespace {

std::uint64_t row_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t row) {
  std::seed_seq seq{seed, stream, row};
  std::uint64_t out[1];
  seq.generate(reinterpret_cast<std::uint32_t*>(out), reinterpret_cast<std::uint32_t*>(out) + 2);
  return out[0];
}

VizOptimizer optimizer_from(const nlohmann::json& config) {
  try {
    auto o = config.at("optimizer").get<VizOptimizer>();
    o.validate();
    return o;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid optimizer config: ") + e.what());
  }
}

std::optional<Dataset> optional_data(const nlohmann::json& config, RunDirectory& run) {
  const auto path = config.value("data", std::string());
  if (path.empty()) return std::nullopt;
  return load_data(path, &run);
}

// One source per run. MVN sources need the dataset to fit class Gaussians.
Tensor<float> sources_for(const nlohmann::json& config, const Shape& shape, const std::optional<Dataset>& data,
                          std::span<const int> labels, std::uint64_t stream) {
  const auto policy = parse_source(get<std::string>(config, "/source"));
  if (policy != SourcePolicy::kRandomNoise && !data) {
    throw ConfigError(std::string("source ") + source_name(policy) + " needs --data");
  }
  std::optional<ClassSamplers> samplers;
  if (policy == SourcePolicy::kMvnSample) samplers.emplace(*data);
  const auto seed = get<std::uint64_t>(config, "/seed");
  std::vector<Tensor<float>> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    rows.push_back(make_source(policy, shape, row_seed(seed, stream, i), data ? &*data : nullptr,
                               samplers ? &*samplers : nullptr, labels[i]));
  }
  return stack<float>(rows);
}

void write_runs(RunDirectory& run, const std::string& stem, const std::vector<VizRun>& runs, Index scale) {
  std::vector<Tensor<float>> images;
  nlohmann::json summaries = nlohmann::json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    write_image(run, stem + "_" + std::to_string(i), enlarge(runs[i].image, scale));
    images.push_back(runs[i].source);
    images.push_back(runs[i].image);
    summaries.push_back(runs[i].summary());
  }
  // Source / result pairs side by side.
  write_image(run, stem + "_pairs", enlarge(tile_images(stack<float>(images), 2), scale));
  write_text(run, stem + "_trace", ".json", summaries.dump() + "\n");
}

nlohmann::json brief(const std::vector<VizRun>& runs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : runs) {
    out.push_back({{"initial_objective", r.initial_objective},
                   {"final_objective", r.final_objective},
                   {"best_iteration", r.best_iteration},
                   {"stagnant", r.stagnant}});
  }
  return out;
}

void run_feature(const nlohmann::json& config) {
  RunDirectory run(require_path(config, "/out"));
  const Checkpoint model = load_model(require_path(config, "/model"), &run);
  const auto data = optional_data(config, run);
  const auto units = get<std::vector<Index>>(config, "/units");
  if (units.empty()) throw ConfigError("at least one unit is required");
  const auto count = get<int>(config, "/count");
  if (count < 1) throw ConfigError("count must be at least 1");
  const bool as_set = config.value("set", false);

  // Either one run per unit, or one run for the whole set.
  std::vector<std::vector<Index>> unit_sets;
  for (int r = 0; r < count; ++r) {
    if (as_set) {
      unit_sets.push_back(units);
    } else {
      for (Index u : units) unit_sets.push_back({u});
    }
  }
  const std::vector<int> labels(unit_sets.size(), -1);
  const auto sources = sources_for(config, model.network.spec.input_shape(), data, labels, 1);
  const auto runs = direct_feature_vis_batch(model.network, unit_sets, sources, optimizer_from(config));
  const auto scale = get<Index>(config, "/scale");
  write_runs(run, "feature", runs, scale);

  nlohmann::json notes = {{"runs", brief(runs)}};
  const auto top = config.value("top", Index{0});
  if (top > 0) {
    if (!data) throw ConfigError("--top needs --data");
    nlohmann::json ranking = nlohmann::json::object();
    for (Index u : units) {
      const auto t = top_activating_images(model.network, *data, u, top);
      auto tile = [&](const std::vector<Index>& ids) {
        std::vector<Tensor<float>> imgs;
        for (Index id : ids) {
          const auto pos = std::find(data->ids.begin(), data->ids.end(), id) - data->ids.begin();
          imgs.push_back(data->image(pos));
        }
        return tile_images(stack<float>(imgs), static_cast<Index>(imgs.size()));
      };
      write_image(run, "top_max_unit" + std::to_string(u), enlarge(tile(t.max_ids), scale));
      write_image(run, "top_min_unit" + std::to_string(u), enlarge(tile(t.min_ids), scale));
      ranking[std::to_string(u)] = {{"max_ids", t.max_ids},
                                    {"max_values", t.max_values},
                                    {"min_ids", t.min_ids},
                                    {"min_values", t.min_values}};
    }
    notes["top_activating"] = ranking;
  }
  finish(run, "viz feature", config, notes);
  std::cout << notes.dump(2) << '\n';
}

void run_invert(const nlohmann::json& config) {
  RunDirectory run(require_path(config, "/out"));
  const Checkpoint model = load_model(require_path(config, "/model"), &run);
  const auto data = optional_data(config, run);
  if (!data) throw ConfigError("inversion needs --data for the target images");
  const auto indices = get<std::vector<Index>>(config, "/targets");
  if (indices.empty()) throw ConfigError("at least one target index is required");
  std::vector<Tensor<float>> targets;
  for (Index i : indices) {
    if (i < 0 || i >= data->size()) throw IndexError("target index " + std::to_string(i) + " outside dataset");
    targets.push_back(data->image(i));
  }
  const std::vector<int> labels(indices.size(), -1);
  const auto sources = sources_for(config, model.network.spec.input_shape(), data, labels, 2);
  const auto runs =
      representation_inversion_batch(model.network, sources, stack<float>(targets), optimizer_from(config));
  const auto scale = get<Index>(config, "/scale");
  write_runs(run, "inversion", runs, scale);
  write_image(run, "targets", enlarge(tile_images(stack<float>(targets), static_cast<Index>(targets.size())), scale));
  const nlohmann::json notes = {{"targets", indices}, {"runs", brief(runs)}};
  finish(run, "viz invert", config, notes);
  std::cout << notes.dump(2) << '\n';
}

void run_classgen(const nlohmann::json& config) {
  RunDirectory run(require_path(config, "/out"));
  const Checkpoint model = load_model(require_path(config, "/model"), &run);
  const auto data = optional_data(config, run);
  const int classes = model.network.spec.num_classes;
  const auto per_class = get<Index>(config, "/per_class");
  if (per_class < 1) throw ConfigError("per_class must be at least 1");
  std::vector<int> targets;
  const int only = config.value("class", -1);
  if (only >= classes) throw IndexError("class " + std::to_string(only) + " outside the model's classes");
  for (int c = 0; c < classes; ++c) {
    if (only >= 0 && c != only) continue;
    for (Index r = 0; r < per_class; ++r) targets.push_back(c);
  }
  const auto sources = sources_for(config, model.network.spec.input_shape(), data, targets, 3);
  const auto runs = class_specific_generation_batch(model.network, targets, sources, optimizer_from(config));

  std::vector<Tensor<float>> images;
  for (const auto& r : runs) images.push_back(r.image);
  const auto generated = stack<float>(images);
  const auto predicted = argmax_rows(predict_logits(model.network, generated));
  Index hits = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) hits += predicted[i] == targets[i] ? 1 : 0;

  const auto scale = get<Index>(config, "/scale");
  write_image(run, "generations", enlarge(tile_images(generated, per_class), scale));
  nlohmann::json summaries = nlohmann::json::array();
  for (const auto& r : runs) summaries.push_back(r.summary());
  write_text(run, "classgen_trace", ".json", summaries.dump() + "\n");
  if (config.value("save_set", false)) {
    Dataset set;
    set.images = generated;
    set.labels = targets;
    set.class_names = data ? data->class_names : std::vector<std::string>();
    if (set.class_names.empty()) {
      for (int c = 0; c < classes; ++c) set.class_names.push_back("class" + std::to_string(c));
    }
    set.split = Split::kTest;
    for (std::size_t i = 0; i < targets.size(); ++i) set.ids.push_back(static_cast<Index>(i));
    const auto path = run.claim("generated", ".bin");
    save_dataset(set, path);
    run.record_output(path);
    auto sidecar = path;
    run.record_output(sidecar.replace_extension(".json"));
  }
  const nlohmann::json notes = {
      {"generated", runs.size()},
      {"classified_as_target", 100.0 * static_cast<double>(hits) / static_cast<double>(runs.size())}};
  finish(run, "viz classgen", config, notes);
  std::cout << notes.dump(2) << '\n';
}

void optimizer_flags(Command& cmd) {
  cmd.flag<std::string>("--model", "/model", "Checkpoint")->required();
  cmd.flag<std::string>("--data", "/data", "Record file (dataset sources, MVN fitting, targets)");
  cmd.flag<std::string>("--source", "/source", "dataset_image, random_noise or mvn_sample");
  cmd.flag<int>("--iterations", "/optimizer/iterations", "Optimizer iterations");
  cmd.flag<double>("--epsilon", "/optimizer/epsilon", "Ball radius around the source");
  cmd.flag<double>("--step", "/optimizer/step", "Step size");
  cmd.flag<std::string>("--norm", "/optimizer/norm", "l2 or linf");
  cmd.flag<Index>("--scale", "/scale", "Pixel replication factor of the written images");
}

}  // namespace

void register_viz_commands(CLI::App& root, CommandList& commands) {
  auto* group = root.add_subcommand("viz", "Feature visualisation, inversion and class generation");
  group->require_subcommand(1);

  auto feature = std::make_unique<Command>(*group, "feature", "Maximise representation units",
                                           nlohmann::json{{"optimizer", VizOptimizer::feature_defaults()},
                                                          {"units", {0}},
                                                          {"count", 1},
                                                          {"source", "random_noise"},
                                                          {"scale", 8},
                                                          {"seed", 0},
                                                          {"out", "runs/viz"}});
  optimizer_flags(*feature);
  feature->flag<std::vector<Index>>("--units", "/units", "Representation units t (or the set z with --set)");
  feature->toggle("--set", "/set", true, "Maximise the mean of all units as one objective");
  feature->flag<int>("--count", "/count", "Runs per unit, each from its own source");
  feature->flag<Index>("--top", "/top", "Also rank --data by each unit and write the top/bottom images");
  feature->flag<std::string>("--out", "/out", "Run directory");
  feature->on_run(run_feature);
  commands.push_back(std::move(feature));

  auto invert = std::make_unique<Command>(*group, "invert", "Invert representations of dataset images",
                                          nlohmann::json{{"optimizer", VizOptimizer::inversion_defaults()},
                                                         {"targets", {0}},
                                                         {"source", "random_noise"},
                                                         {"scale", 8},
                                                         {"seed", 0},
                                                         {"out", "runs/viz"}});
  optimizer_flags(*invert);
  invert->flag<std::vector<Index>>("--targets", "/targets", "Indices of the target images in --data");
  invert->flag<std::string>("--out", "/out", "Run directory");
  invert->on_run(run_invert);
  commands.push_back(std::move(invert));

  auto classgen = std::make_unique<Command>(*group, "classgen", "Generate images by maximising class logits",
                                            nlohmann::json{{"optimizer", VizOptimizer::generation_defaults()},
                                                           {"per_class", 4},
                                                           {"source", "mvn_sample"},
                                                           {"scale", 8},
                                                           {"seed", 0},
                                                           {"out", "runs/viz"}});
  optimizer_flags(*classgen);
  classgen->flag<int>("--class", "/class", "Only this class (default: every class)");
  classgen->flag<Index>("--per-class", "/per_class", "Generations per class");
  classgen->toggle("--save-set", "/save_set", true, "Also write the generations as a record file");
  classgen->flag<std::string>("--out", "/out", "Run directory");
  classgen->on_run(run_classgen);
  commands.push_back(std::move(classgen));
}

}  // namespace rl::cli

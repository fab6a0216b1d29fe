#include <iostream>

#include <spdlog/spdlog.h>

#include "cli_common.h"
#include "robustlens/attributions.h"

namespace rl::cli {

namespace {

struct Subject {
  Tensor<float> image;
  int label = -1;
  Index id = -1;
};

Subject pick_subject(const nlohmann::json& config, RunDirectory& run, const Dataset** data_out, Dataset& storage) {
  Subject s;
  if (config.contains("image") && !config.at("image").get<std::string>().empty()) {
    s.image = unstack_one(load_image_set(config.at("image").get<std::string>(), &run), 0);
    return s;
  }
  storage = load_data(require_path(config, "/data"), &run);
  *data_out = &storage;
  const auto index = get<Index>(config, "/index");
  if (index < 0 || index >= storage.size()) {
    throw IndexError("sample index " + std::to_string(index) + " outside dataset of " +
                     std::to_string(storage.size()));
  }
  s.image = storage.image(index);
  s.label = storage.labels[static_cast<std::size_t>(index)];
  s.id = storage.ids[static_cast<std::size_t>(index)];
  return s;
}

void emit(RunDirectory& run, const std::string& command, const nlohmann::json& config, const AttributionMap& map,
          const Tensor<float>& image, const Subject& subject) {
  const auto rendered = render_attribution(map, image, get<double>(config, "/alpha"));
  const auto factor = get<Index>(config, "/scale");
  write_image(run, "heatmap", enlarge(rendered.heatmap, factor));
  write_image(run, "blended", enlarge(rendered.blended, factor));
  const auto path = run.claim("attribution", ".rlat");
  save_attribution(map, path);
  run.record_output(path);
  auto sidecar = path;
  run.record_output(sidecar.replace_extension(".json"));
  nlohmann::json notes = {{"attribution", map.metadata()},
                          {"total", map.total()},
                          {"score_difference", map.score_input - map.score_baseline}};
  if (subject.id >= 0) notes["sample_id"] = subject.id;
  if (subject.label >= 0) notes["label"] = subject.label;
  finish(run, command, config, notes);
  std::cout << notes.dump(2) << '\n';
}

int choose_target(const nlohmann::json& config, const Network<float>& net, const Tensor<float>& image, int label) {
  const auto policy = parse_target_policy(get<std::string>(config, "/target"));
  const auto logits = forward_logits(net, as_batch(image));
  if (policy == TargetPolicy::kLabel && label < 0) throw ConfigError("target 'label' needs a dataset sample");
  return resolve_target(policy, unstack_one(logits, 0), label, config.value("class", -1));
}

TargetScore score_kind(const nlohmann::json& config) {
  const auto name = get<std::string>(config, "/score");
  if (name == "softmax") return TargetScore::kSoftmax;
  if (name == "logit") return TargetScore::kLogit;
  throw ConfigError("score must be softmax or logit");
}

void run_ig(const nlohmann::json& config) {
  RunDirectory run(require_path(config, "/out"));
  const Checkpoint model = load_model(require_path(config, "/model"), &run);
  Dataset storage;
  const Dataset* data = nullptr;
  const Subject subject = pick_subject(config, run, &data, storage);
  const int target = choose_target(config, model.network, subject.image, subject.label);
  const auto policy = parse_baseline(get<std::string>(config, "/baseline"));
  if (policy == BaselinePolicy::kDatasetSample && data == nullptr) {
    throw ConfigError("baseline dataset_sample needs --data");
  }
  const auto seed = get<std::uint64_t>(config, "/seed");
  const Tensor<float> baseline = make_baseline(policy, subject.image, data ? &data->images : nullptr, seed);

  IgOptions options;
  options.steps = get<int>(config, "/steps");
  options.normalization = parse_normalization(get<std::string>(config, "/normalization"));
  if (options.steps < 1) throw ConfigError("steps must be at least 1");
  // Attributions are computed in 64-bit.
  const Network<double> net = model.network.cast<double>();
  auto map = integrated_gradients<double>(target_score<double>(logits_of(net), target, score_kind(config)),
                                          subject.image.cast<double>(), baseline.cast<double>(), options);
  map.baseline = baseline_name(policy);
  map.seed = seed;
  emit(run, "explain ig", config, map, subject.image, subject);
}

void run_eg(const nlohmann::json& config) {
  RunDirectory run(require_path(config, "/out"));
  const Checkpoint model = load_model(require_path(config, "/model"), &run);
  Dataset storage;
  const Dataset* data = nullptr;
  const Subject subject = pick_subject(config, run, &data, storage);
  Tensor<float> background;
  if (config.contains("background") && !config.at("background").get<std::string>().empty()) {
    background = load_image_set(config.at("background").get<std::string>(), &run);
  } else if (data != nullptr) {
    background = data->images;
  } else {
    throw ConfigError("expected gradients needs --background or --data");
  }
  const int target = choose_target(config, model.network, subject.image, subject.label);
  EgOptions options;
  options.samples = get<int>(config, "/samples");
  options.seed = get<std::uint64_t>(config, "/seed");
  if (options.samples < 1) throw ConfigError("samples must be at least 1");
  const Network<double> net = model.network.cast<double>();
  auto map = expected_gradients<double>(target_score<double>(logits_of(net), target, score_kind(config)),
                                        subject.image.cast<double>(), background.cast<double>(), options);
  emit(run, "explain eg", config, map, subject.image, subject);
}

void common_flags(Command& cmd) {
  cmd.flag<std::string>("--model", "/model", "Checkpoint")->required();
  cmd.flag<std::string>("--data", "/data", "Record file supplying the sample (and baselines)");
  cmd.flag<Index>("--index", "/index", "Sample index within --data");
  cmd.flag<std::string>("--image", "/image", "Explain this .ppm instead of a dataset sample");
  cmd.flag<std::string>("--target", "/target", "predicted, label or explicit");
  cmd.flag<int>("--class", "/class", "Class for --target explicit");
  cmd.flag<std::string>("--score", "/score", "softmax or logit");
  cmd.flag<double>("--alpha", "/alpha", "Heatmap opacity over the image");
  cmd.flag<Index>("--scale", "/scale", "Pixel replication factor of the written images");
}

nlohmann::json common_defaults(const std::string& out) {
  return {{"index", 0}, {"target", "predicted"}, {"score", "softmax"}, {"alpha", 0.7}, {"scale", 8},
          {"seed", 0},  {"out", out}};
}

}  // namespace

void register_explain_commands(CLI::App& root, CommandList& commands) {
  auto* group = root.add_subcommand("explain", "Attribution maps");
  group->require_subcommand(1);

  auto defaults = common_defaults("runs/explain");
  defaults["steps"] = 64;
  defaults["baseline"] = "zeros";
  defaults["normalization"] = "literal";
  auto ig = std::make_unique<Command>(*group, "ig", "Integrated gradients", defaults);
  common_flags(*ig);
  ig->flag<int>("--m,--steps", "/steps", "Interpolation steps m");
  ig->flag<std::string>("--baseline", "/baseline", "zeros, uniform_noise or dataset_sample");
  ig->flag<std::string>("--normalization", "/normalization", "literal (1/(m+1)) or trapezoid (1/m)");
  ig->flag<std::string>("--out", "/out", "Run directory");
  ig->on_run(run_ig);
  commands.push_back(std::move(ig));

  defaults = common_defaults("runs/explain");
  defaults["samples"] = 256;
  auto eg = std::make_unique<Command>(*group, "eg", "Expected gradients", defaults);
  common_flags(*eg);
  eg->flag<int>("--samples", "/samples", "Monte-Carlo samples n_s");
  eg->flag<std::string>("--background", "/background", "Baseline images (.ppm directory or record file)");
  eg->flag<std::string>("--out", "/out", "Run directory");
  eg->on_run(run_eg);
  commands.push_back(std::move(eg));
}

}  // namespace rl::cli

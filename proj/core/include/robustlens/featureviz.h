#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "robustlens/attacks.h"
#include "robustlens/dataset.h"
#include "robustlens/metrics.h"

namespace rl {

enum class VizKind { kActivationMax, kActivationSetMax, kRepresentationInvert, kClassLogitMax };
enum class SourcePolicy { kDatasetImage, kRandomNoise, kMvnSample };

const char* viz_kind_name(VizKind kind);
const char* source_name(SourcePolicy policy);
SourcePolicy parse_source(const std::string& name);

// Projected gradient steps on the perturbation delta of the source image.
struct VizOptimizer {
  Norm norm = Norm::kL2;
  double epsilon = 1000.0;
  double step = 1.0;
  int iterations = 400;
  // Images are kept valid by clipping source + delta into this range.
  std::optional<PixelRange> clip = PixelRange{};

  void validate() const;

  static VizOptimizer feature_defaults() { return {Norm::kL2, 1000.0, 1.0, 400}; }
  static VizOptimizer inversion_defaults() { return {Norm::kL2, 1000.0, 1.0, 2000}; }
  static VizOptimizer inversion_long() { return {Norm::kL2, 1000.0, 1.0, 10000}; }
  static VizOptimizer generation_defaults() { return {Norm::kL2, 30.0, 0.5, 60}; }
};

void to_json(nlohmann::json& j, const VizOptimizer& o);
void from_json(const nlohmann::json& j, VizOptimizer& o);

struct VizRun {
  VizKind kind = VizKind::kActivationMax;
  std::vector<Index> units;  // t, or the set z
  int target_class = -1;
  Tensor<float> source;
  Tensor<float> image;  // best iterate
  // Objective at every iterate, including the start: iterations + 1 values.
  std::vector<double> trace;
  double initial_objective = 0.0;
  double final_objective = 0.0;  // best value in the trace
  int best_iteration = 0;
  bool maximize = true;
  bool stagnant = false;  // zero gradient at every iterate
  std::uint64_t seed = 0;

  nlohmann::json summary() const;
};

// Per-row objective of a batch [B, ...] -> [B] on the batch's tape.
using RowObjective = std::function<Var<float>(const Var<float>& batch)>;

// Safeguarded projected gradient ascent (or descent) run independently on
// every row of `sources`. L2 steps use the per-row normalised gradient, Linf
// the sign. Each returned image is the best iterate seen.
std::vector<VizRun> optimize_rows(const RowObjective& objective, const Tensor<float>& sources,
                                  const VizOptimizer& optimizer, bool maximize);

// R(x)_t averaged over each unit set; {t} is the single-unit case.
RowObjective activation_objective(const Network<float>& net, std::vector<std::vector<Index>> unit_sets);
// ||R(x) - R(target)||_2 / ||R(target)||_2 per row.
RowObjective inversion_objective(const Network<float>& net, const Tensor<float>& targets);
// Logit of the given class per row.
RowObjective class_logit_objective(const Network<float>& net, std::vector<int> classes);

VizRun direct_feature_vis(const Network<float>& net, std::span<const Index> units, const Tensor<float>& source,
                          const VizOptimizer& optimizer = VizOptimizer::feature_defaults());
std::vector<VizRun> direct_feature_vis_batch(const Network<float>& net, const std::vector<std::vector<Index>>& units,
                                             const Tensor<float>& sources,
                                             const VizOptimizer& optimizer = VizOptimizer::feature_defaults());

VizRun representation_inversion(const Network<float>& net, const Tensor<float>& source, const Tensor<float>& target,
                                const VizOptimizer& optimizer = VizOptimizer::inversion_defaults());
std::vector<VizRun> representation_inversion_batch(const Network<float>& net, const Tensor<float>& sources,
                                                   const Tensor<float>& targets,
                                                   const VizOptimizer& optimizer = VizOptimizer::inversion_defaults());

VizRun class_specific_generation(const Network<float>& net, int target_class, const Tensor<float>& source,
                                 const VizOptimizer& optimizer = VizOptimizer::generation_defaults());
std::vector<VizRun> class_specific_generation_batch(const Network<float>& net, std::span<const int> classes,
                                                    const Tensor<float>& sources,
                                                    const VizOptimizer& optimizer = VizOptimizer::generation_defaults());

struct TopActivating {
  std::vector<Index> max_ids;  // highest first
  std::vector<double> max_values;
  std::vector<Index> min_ids;  // lowest first
  std::vector<double> min_values;
};

// Exact ranking of dataset samples by R(x)_t, ties broken by sample id.
TopActivating top_activating_images(const Network<float>& net, const Dataset& data, Index unit, Index count);

// Per-class pixel-space Gaussians for source sampling.
class ClassSamplers {
 public:
  ClassSamplers(const Dataset& data, double ridge = 1e-6);
  const MvnSampler& at(int label) const;
  int num_classes() const { return static_cast<int>(samplers_.size()); }

 private:
  std::vector<MvnSampler> samplers_;
};

// Starting image for a visualisation. `label` selects the MVN class and,
// for dataset_image, restricts the draw to that class when >= 0.
Tensor<float> make_source(SourcePolicy policy, const Shape& sample_shape, std::uint64_t seed, const Dataset* data,
                          const ClassSamplers* samplers, int label);

}  // namespace rl

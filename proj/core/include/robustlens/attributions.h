#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "robustlens/attacks.h"

namespace rl {

enum class AttributionMethod { kIntegratedGradients, kExpectedGradients };
enum class BaselinePolicy { kZeros, kUniformNoise, kDatasetSample };
enum class TargetPolicy { kPredicted, kLabel, kExplicit };
// Quantity being explained: softmax probability of the target class, or its
// raw logit (diagnostics).
enum class TargetScore { kSoftmax, kLogit };

// Step width of the trapezoid sum over the m+1 points alpha_i = i/m.
enum class IgNormalization {
  kLiteral,    // 1/(m+1)
  kTrapezoid,  // 1/m, the composite trapezoid rule on [0,1]
};

const char* method_name(AttributionMethod method);
const char* baseline_name(BaselinePolicy policy);
BaselinePolicy parse_baseline(const std::string& name);
TargetPolicy parse_target_policy(const std::string& name);
const char* normalization_name(IgNormalization n);
IgNormalization parse_normalization(const std::string& name);

// Per-row scalar score of a batch: [B, ...] -> [B], recorded on the input's
// tape. Rows must not interact (eval-mode networks qualify).
template <typename T>
using ScoreFn = std::function<Var<T>(const Var<T>& batch)>;

template <typename T>
ScoreFn<T> target_score(LogitsFn<T> logits, int target, TargetScore score = TargetScore::kSoftmax);

// s(x) = w . x over the flattened row, for closed-form checks.
template <typename T>
ScoreFn<T> linear_score(Tensor<T> weights);

template <typename T>
std::vector<T> evaluate_scores(const ScoreFn<T>& score, const Tensor<T>& batch);

// Gradient of the score of every row with respect to that row.
template <typename T>
Tensor<T> score_gradients(const ScoreFn<T>& score, const Tensor<T>& batch);

struct AttributionMap {
  Tensor<double> values;  // same shape as the explained input
  AttributionMethod method = AttributionMethod::kIntegratedGradients;
  int target = 0;
  TargetScore score = TargetScore::kSoftmax;
  double score_input = 0.0;
  double score_baseline = 0.0;  // EG: mean score over the drawn baselines
  std::string baseline = "zeros";
  int steps = 0;    // IG
  int samples = 0;  // EG
  IgNormalization normalization = IgNormalization::kLiteral;
  std::uint64_t seed = 0;

  double total() const;
  // Sum over the leading (channel) axis: [C,H,W] -> [H,W].
  Tensor<double> channel_sum() const;
  nlohmann::json metadata() const;
};

struct IgOptions {
  int steps = 64;
  IgNormalization normalization = IgNormalization::kLiteral;
  Index chunk = 64;  // interpolation points per forward pass
};

// phi = (x - x') * dalpha/2 * sum_{i=1..m} (g_i + g_{i-1}), g_i the score
// gradient at x' + (i/m)(x - x').
template <typename T>
AttributionMap integrated_gradients(const ScoreFn<T>& score, const Tensor<T>& x, const Tensor<T>& baseline,
                                    const IgOptions& options = {});

struct EgOptions {
  int samples = 256;
  std::uint64_t seed = 0;
  Index chunk = 64;
};

// Monte-Carlo mean over (x' ~ background, alpha ~ U(0,1)) of
// (x - x') * grad s(x' + alpha (x - x')). `background` is [M, ...].
template <typename T>
AttributionMap expected_gradients(const ScoreFn<T>& score, const Tensor<T>& x, const Tensor<T>& background,
                                  const EgOptions& options = {});

// Exact Shapley values of the game v(S) = f(x on S, baseline elsewhere) by
// enumerating all 2^n coalitions. Refuses n > 12.
inline constexpr std::size_t kMaxShapleyFeatures = 12;
std::vector<double> exact_shapley(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> x, std::span<const double> baseline);

// IG baseline for one input under a policy.
Tensor<float> make_baseline(BaselinePolicy policy, const Tensor<float>& x, const Tensor<float>* dataset_images,
                            std::uint64_t seed);

// Class to explain given the policy.
int resolve_target(TargetPolicy policy, const Tensor<float>& logits_row, int label, int explicit_target);

struct RenderedAttribution {
  Tensor<float> heatmap;  // [3,H,W] diverging colour per pixel
  Tensor<float> blended;  // heatmap over the greyscale image
};

// Channel-summed values on a blue-grey-red scale symmetric about zero
// (|max| maps to the extremes), alpha-blended over the image's luminance.
RenderedAttribution render_attribution(const AttributionMap& map, const Tensor<float>& image, double alpha = 0.7);

// "RLAT" | u32 version | u8 method | u32 rank | u64 extents | f64 payload,
// all little-endian, plus a JSON sidecar (<stem>.json) with the metadata.
std::vector<std::uint8_t> encode_attribution(const AttributionMap& map);
AttributionMap decode_attribution(std::span<const std::uint8_t> bytes, const nlohmann::json& metadata = {});
void save_attribution(const AttributionMap& map, const std::filesystem::path& path);
AttributionMap load_attribution(const std::filesystem::path& path);

}  // namespace rl

#include "robustlens/attributions.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

namespace rl {

namespace {

static_assert(std::endian::native == std::endian::little, "attribution I/O assumes a little-endian host");

constexpr std::uint32_t kAttributionVersion = 1;

template <typename T>
Tensor<T> interpolate(const Tensor<T>& from, const Tensor<T>& to, std::span<const double> alphas) {
  Shape shape = from.shape();
  shape.insert(shape.begin(), static_cast<Index>(alphas.size()));
  Tensor<T> out(std::move(shape));
  const Index n = from.size();
  for (std::size_t k = 0; k < alphas.size(); ++k) {
    const T a = static_cast<T>(alphas[k]);
    T* row = out.raw() + static_cast<Index>(k) * n;
    for (Index i = 0; i < n; ++i) row[i] = from[i] + a * (to[i] - from[i]);
  }
  return out;
}

void require_same(const char* what, const Shape& a, const Shape& b) {
  if (a != b) throw DimensionError(std::string(what) + ": shapes " + to_string(a) + " and " + to_string(b) + " differ");
}

}  // namespace

const char* method_name(AttributionMethod method) {
  return method == AttributionMethod::kIntegratedGradients ? "integrated_gradients" : "expected_gradients";
}

const char* baseline_name(BaselinePolicy policy) {
  switch (policy) {
    case BaselinePolicy::kZeros:
      return "zeros";
    case BaselinePolicy::kUniformNoise:
      return "uniform_noise";
    default:
      return "dataset_sample";
  }
}

BaselinePolicy parse_baseline(const std::string& name) {
  if (name == "zeros") return BaselinePolicy::kZeros;
  if (name == "uniform_noise") return BaselinePolicy::kUniformNoise;
  if (name == "dataset_sample") return BaselinePolicy::kDatasetSample;
  throw ConfigError("unknown baseline policy '" + name + "'");
}

TargetPolicy parse_target_policy(const std::string& name) {
  if (name == "predicted") return TargetPolicy::kPredicted;
  if (name == "label") return TargetPolicy::kLabel;
  if (name == "explicit") return TargetPolicy::kExplicit;
  throw ConfigError("unknown target policy '" + name + "'");
}

const char* normalization_name(IgNormalization n) { return n == IgNormalization::kLiteral ? "literal" : "trapezoid"; }

IgNormalization parse_normalization(const std::string& name) {
  if (name == "literal") return IgNormalization::kLiteral;
  if (name == "trapezoid") return IgNormalization::kTrapezoid;
  throw ConfigError("unknown IG normalization '" + name + "' (expected literal or trapezoid)");
}

template <typename T>
ScoreFn<T> target_score(LogitsFn<T> logits, int target, TargetScore score) {
  if (target < 0) throw IndexError("negative target class");
  return [logits = std::move(logits), target, score](const Var<T>& batch) {
    Var<T> t = logits(batch);
    if (target >= t.shape().at(1)) {
      throw IndexError("target class " + std::to_string(target) + " >= class count " + std::to_string(t.shape()[1]));
    }
    const std::vector<int> index(static_cast<std::size_t>(t.shape()[0]), target);
    return pick(score == TargetScore::kSoftmax ? softmax(t) : t, index);
  };
}

template <typename T>
ScoreFn<T> linear_score(Tensor<T> weights) {
  const Index d = weights.size();
  auto w = std::make_shared<Tensor<T>>(weights.reshaped({1, d}));
  return [w, d](const Var<T>& batch) {
    if (batch.shape().empty() || numel(batch.shape()) != batch.shape()[0] * d) {
      throw DimensionError("linear score over " + std::to_string(d) + " features applied to " +
                           to_string(batch.shape()));
    }
    const Index b = batch.shape()[0];
    Var<T> out = linear(reshape(batch, {b, d}), batch.tape().constant(*w), std::optional<Var<T>>{});
    return reshape(out, {b});
  };
}

template <typename T>
std::vector<T> evaluate_scores(const ScoreFn<T>& score, const Tensor<T>& batch) {
  Tape<T> tape;
  const auto& v = score(tape.constant(batch)).value();
  return {v.data().begin(), v.data().end()};
}

template <typename T>
Tensor<T> score_gradients(const ScoreFn<T>& score, const Tensor<T>& batch) {
  Tape<T> tape;
  Var<T> in = tape.leaf(batch, true);
  tape.backward(sum(score(in)));
  return tape.grad(in);
}

double AttributionMap::total() const {
  double acc = 0.0;
  for (double v : values.data()) acc += v;
  return acc;
}

Tensor<double> AttributionMap::channel_sum() const {
  if (values.rank() != 3) throw DimensionError("channel_sum expects [C,H,W], got " + to_string(values.shape()));
  const Index c = values.dim(0), hw = values.dim(1) * values.dim(2);
  Tensor<double> out({values.dim(1), values.dim(2)});
  for (Index ch = 0; ch < c; ++ch) {
    for (Index i = 0; i < hw; ++i) out[i] += values[ch * hw + i];
  }
  return out;
}

nlohmann::json AttributionMap::metadata() const {
  nlohmann::json j = {{"method", method_name(method)},
                      {"shape", values.shape()},
                      {"target", target},
                      {"score", score == TargetScore::kSoftmax ? "softmax" : "logit"},
                      {"score_input", score_input},
                      {"score_baseline", score_baseline},
                      {"baseline", baseline},
                      {"seed", seed},
                      {"total", total()}};
  if (method == AttributionMethod::kIntegratedGradients) {
    j["steps"] = steps;
    j["normalization"] = normalization_name(normalization);
  } else {
    j["samples"] = samples;
  }
  return j;
}

template <typename T>
AttributionMap integrated_gradients(const ScoreFn<T>& score, const Tensor<T>& x, const Tensor<T>& baseline,
                                    const IgOptions& options) {
  require_same("integrated_gradients", x.shape(), baseline.shape());
  if (options.steps < 1) throw ConfigError("integrated gradients needs m >= 1 steps");
  if (options.chunk < 1) throw ConfigError("chunk must be at least 1");
  const int m = options.steps;
  const double dalpha = options.normalization == IgNormalization::kLiteral ? 1.0 / (m + 1) : 1.0 / m;

  std::vector<double> integral(static_cast<std::size_t>(x.size()), 0.0);
  for (int begin = 0; begin <= m; begin += static_cast<int>(options.chunk)) {
    const int end = std::min(m + 1, begin + static_cast<int>(options.chunk));
    std::vector<double> alphas;
    for (int i = begin; i < end; ++i) alphas.push_back(static_cast<double>(i) / m);
    const auto grads = score_gradients(score, interpolate(baseline, x, alphas));
    for (int i = begin; i < end; ++i) {
      // Trapezoid weights: endpoints count once, interior points twice, over 2.
      const double weight = (i == 0 || i == m) ? 0.5 * dalpha : dalpha;
      auto g = grads.row(i - begin);
      for (std::size_t d = 0; d < integral.size(); ++d) integral[d] += weight * static_cast<double>(g[d]);
    }
  }

  AttributionMap map;
  map.method = AttributionMethod::kIntegratedGradients;
  map.values = Tensor<double>(x.shape());
  for (Index d = 0; d < x.size(); ++d) {
    map.values[d] = (static_cast<double>(x[d]) - static_cast<double>(baseline[d])) * integral[static_cast<std::size_t>(d)];
  }
  const Tensor<T> ends = stack<T>(std::vector<Tensor<T>>{x, baseline});
  const auto s = evaluate_scores(score, ends);
  map.score_input = s[0];
  map.score_baseline = s[1];
  map.steps = m;
  map.normalization = options.normalization;
  return map;
}

template <typename T>
AttributionMap expected_gradients(const ScoreFn<T>& score, const Tensor<T>& x, const Tensor<T>& background,
                                  const EgOptions& options) {
  if (background.rank() != x.rank() + 1 || background.dim(0) < 1) {
    throw DimensionError("expected_gradients: background " + to_string(background.shape()) +
                         " is not a non-empty stack of inputs shaped " + to_string(x.shape()));
  }
  require_same("expected_gradients", Shape(background.shape().begin() + 1, background.shape().end()), x.shape());
  if (options.samples < 1) throw ConfigError("expected gradients needs at least one sample");
  if (options.chunk < 1) throw ConfigError("chunk must be at least 1");

  // Draws are fixed up front so results do not depend on the chunk size.
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<Index> pick_row(0, background.dim(0) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Index> rows(static_cast<std::size_t>(options.samples));
  std::vector<double> alphas(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    rows[k] = pick_row(rng);
    double a = 0.0;
    while (a == 0.0) a = unit(rng);
    alphas[k] = a;
  }

  const Index n = x.size();
  std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
  for (std::size_t begin = 0; begin < rows.size(); begin += static_cast<std::size_t>(options.chunk)) {
    const std::size_t end = std::min(rows.size(), begin + static_cast<std::size_t>(options.chunk));
    Shape shape = x.shape();
    shape.insert(shape.begin(), static_cast<Index>(end - begin));
    Tensor<T> points(shape);
    for (std::size_t k = begin; k < end; ++k) {
      auto ref = background.row(rows[k]);
      const T a = static_cast<T>(alphas[k]);
      T* dst = points.raw() + static_cast<Index>(k - begin) * n;
      for (Index d = 0; d < n; ++d) dst[d] = ref[static_cast<std::size_t>(d)] + a * (x[d] - ref[static_cast<std::size_t>(d)]);
    }
    const auto grads = score_gradients(score, points);
    for (std::size_t k = begin; k < end; ++k) {
      auto ref = background.row(rows[k]);
      auto g = grads.row(static_cast<Index>(k - begin));
      for (Index d = 0; d < n; ++d) {
        const auto i = static_cast<std::size_t>(d);
        acc[i] += (static_cast<double>(x[d]) - static_cast<double>(ref[i])) * static_cast<double>(g[i]);
      }
    }
  }

  AttributionMap map;
  map.method = AttributionMethod::kExpectedGradients;
  map.values = Tensor<double>(x.shape());
  for (Index d = 0; d < n; ++d) map.values[d] = acc[static_cast<std::size_t>(d)] / options.samples;
  map.score_input = evaluate_scores(score, as_batch(x))[0];
  double base = 0.0;
  for (Index begin = 0; begin < background.dim(0); begin += options.chunk) {
    const Index end = std::min(background.dim(0), begin + options.chunk);
    for (T s : evaluate_scores(score, slice_rows(background, begin, end))) base += static_cast<double>(s);
  }
  map.score_baseline = base / static_cast<double>(background.dim(0));
  map.baseline = "dataset_sample";
  map.samples = options.samples;
  map.seed = options.seed;
  return map;
}

std::vector<double> exact_shapley(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> x, std::span<const double> baseline) {
  if (x.size() != baseline.size()) throw DimensionError("exact_shapley: input and baseline lengths differ");
  const std::size_t n = x.size();
  if (n > kMaxShapleyFeatures) {
    throw ConfigError("exact Shapley enumeration refused for " + std::to_string(n) + " features (limit " +
                      std::to_string(kMaxShapleyFeatures) + ")");
  }
  const std::size_t subsets = std::size_t{1} << n;
  std::vector<double> value(subsets);
  std::vector<double> point(n);
  for (std::size_t mask = 0; mask < subsets; ++mask) {
    for (std::size_t j = 0; j < n; ++j) point[j] = (mask >> j) & 1 ? x[j] : baseline[j];
    value[mask] = f(point);
  }
  std::vector<double> factorial(n + 1, 1.0);
  for (std::size_t k = 1; k <= n; ++k) factorial[k] = factorial[k - 1] * static_cast<double>(k);
  std::vector<double> phi(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t bit = std::size_t{1} << j;
    for (std::size_t mask = 0; mask < subsets; ++mask) {
      if (mask & bit) continue;
      const auto s = static_cast<std::size_t>(std::popcount(mask));
      const double weight = factorial[s] * factorial[n - s - 1] / factorial[n];
      phi[j] += weight * (value[mask | bit] - value[mask]);
    }
  }
  return phi;
}

Tensor<float> make_baseline(BaselinePolicy policy, const Tensor<float>& x, const Tensor<float>* dataset_images,
                            std::uint64_t seed) {
  switch (policy) {
    case BaselinePolicy::kZeros:
      return Tensor<float>::zeros(x.shape());
    case BaselinePolicy::kUniformNoise: {
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<float> u(0.0f, 1.0f);
      Tensor<float> out(x.shape());
      for (float& v : out.data()) v = u(rng);
      return out;
    }
    default: {
      if (dataset_images == nullptr || dataset_images->rank() < 1 || dataset_images->dim(0) == 0) {
        throw ConfigError("dataset_sample baseline needs a non-empty dataset");
      }
      std::mt19937_64 rng(seed);
      std::uniform_int_distribution<Index> row(0, dataset_images->dim(0) - 1);
      Tensor<float> out = unstack_one(*dataset_images, row(rng));
      require_same("dataset baseline", out.shape(), x.shape());
      return out;
    }
  }
}

int resolve_target(TargetPolicy policy, const Tensor<float>& logits_row, int label, int explicit_target) {
  const auto classes = static_cast<int>(logits_row.size());
  int target = 0;
  switch (policy) {
    case TargetPolicy::kPredicted:
      target = static_cast<int>(std::max_element(logits_row.data().begin(), logits_row.data().end()) -
                                logits_row.data().begin());
      break;
    case TargetPolicy::kLabel:
      target = label;
      break;
    default:
      target = explicit_target;
  }
  if (target < 0 || target >= classes) {
    throw IndexError("target class " + std::to_string(target) + " outside [0, " + std::to_string(classes) + ")");
  }
  return target;
}

RenderedAttribution render_attribution(const AttributionMap& map, const Tensor<float>& image, double alpha) {
  const Tensor<double> summed = map.channel_sum();
  const Index h = summed.dim(0), w = summed.dim(1);
  if (image.rank() != 3 || image.dim(1) != h || image.dim(2) != w) {
    throw DimensionError("render_attribution: image " + to_string(image.shape()) + " vs map " +
                         to_string(map.values.shape()));
  }
  constexpr float kCool[3] = {0.230f, 0.299f, 0.754f};
  constexpr float kNeutral[3] = {0.865f, 0.865f, 0.865f};
  constexpr float kWarm[3] = {0.706f, 0.016f, 0.150f};
  double scale = 0.0;
  for (double v : summed.data()) scale = std::max(scale, std::abs(v));

  RenderedAttribution out{Tensor<float>({3, h, w}), Tensor<float>({3, h, w})};
  const Index hw = h * w;
  for (Index i = 0; i < hw; ++i) {
    const float t = scale > 0.0 ? static_cast<float>(summed[i] / scale) : 0.0f;
    const float* end = t >= 0.0f ? kWarm : kCool;
    const float a = std::abs(t);
    float grey = image[i];
    if (image.dim(0) >= 3) grey = 0.299f * image[i] + 0.587f * image[hw + i] + 0.114f * image[2 * hw + i];
    grey = std::clamp(grey, 0.0f, 1.0f);
    for (Index c = 0; c < 3; ++c) {
      const float colour = kNeutral[c] + a * (end[c] - kNeutral[c]);
      out.heatmap[c * hw + i] = colour;
      out.blended[c * hw + i] = static_cast<float>(alpha) * colour + static_cast<float>(1.0 - alpha) * grey;
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_attribution(const AttributionMap& map) {
  std::vector<std::uint8_t> out{'R', 'L', 'A', 'T'};
  auto put = [&out](const auto& value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out.insert(out.end(), p, p + sizeof(value));
  };
  put(kAttributionVersion);
  put(static_cast<std::uint8_t>(map.method == AttributionMethod::kIntegratedGradients ? 0 : 1));
  put(static_cast<std::uint32_t>(map.values.rank()));
  for (Index e : map.values.shape()) put(static_cast<std::uint64_t>(e));
  const auto* p = reinterpret_cast<const std::uint8_t*>(map.values.raw());
  out.insert(out.end(), p, p + map.values.size() * sizeof(double));
  return out;
}

AttributionMap decode_attribution(std::span<const std::uint8_t> bytes, const nlohmann::json& metadata) {
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (bytes.size() - pos < n) throw FormatError("attribution block truncated at offset " + std::to_string(pos));
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  char magic[4];
  take(magic, 4);
  if (std::memcmp(magic, "RLAT", 4) != 0) throw FormatError("not an attribution block (bad magic)");
  std::uint32_t version = 0, rank = 0;
  std::uint8_t method = 0;
  take(&version, 4);
  if (version != kAttributionVersion) throw FormatError("unsupported attribution version " + std::to_string(version));
  take(&method, 1);
  if (method > 1) throw FormatError("unknown attribution method tag " + std::to_string(method));
  take(&rank, 4);
  Shape shape(rank);
  for (auto& e : shape) {
    std::uint64_t v = 0;
    take(&v, 8);
    e = static_cast<Index>(v);
  }
  AttributionMap map;
  map.method = method == 0 ? AttributionMethod::kIntegratedGradients : AttributionMethod::kExpectedGradients;
  map.values = Tensor<double>(shape);
  take(map.values.raw(), static_cast<std::size_t>(map.values.size()) * sizeof(double));
  if (pos != bytes.size()) throw FormatError("trailing bytes after attribution payload");
  if (!metadata.is_null() && !metadata.empty()) {
    map.target = metadata.value("target", 0);
    map.score = metadata.value("score", std::string("softmax")) == "logit" ? TargetScore::kLogit : TargetScore::kSoftmax;
    map.score_input = metadata.value("score_input", 0.0);
    map.score_baseline = metadata.value("score_baseline", 0.0);
    map.baseline = metadata.value("baseline", std::string("zeros"));
    map.steps = metadata.value("steps", 0);
    map.samples = metadata.value("samples", 0);
    map.normalization = parse_normalization(metadata.value("normalization", std::string("literal")));
    map.seed = metadata.value("seed", std::uint64_t{0});
  }
  return map;
}

void save_attribution(const AttributionMap& map, const std::filesystem::path& path) {
  const auto bytes = encode_attribution(map);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  auto side = path;
  side.replace_extension(".json");
  std::ofstream meta(side, std::ios::trunc);
  if (!meta) throw FormatError("cannot write " + side.string());
  meta << map.metadata().dump(2) << '\n';
}

AttributionMap load_attribution(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  auto side = path;
  side.replace_extension(".json");
  nlohmann::json meta;
  if (std::ifstream ms(side); ms) {
    try {
      meta = nlohmann::json::parse(ms);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(side.string() + ": " + e.what());
    }
  }
  return decode_attribution(bytes, meta);
}

#define RL_INSTANTIATE_ATTR(T)                                                                          \
  template ScoreFn<T> target_score(LogitsFn<T>, int, TargetScore);                                     \
  template ScoreFn<T> linear_score(Tensor<T>);                                                          \
  template std::vector<T> evaluate_scores(const ScoreFn<T>&, const Tensor<T>&);                         \
  template Tensor<T> score_gradients(const ScoreFn<T>&, const Tensor<T>&);                              \
  template AttributionMap integrated_gradients(const ScoreFn<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                               const IgOptions&);                                       \
  template AttributionMap expected_gradients(const ScoreFn<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                             const EgOptions&);

RL_INSTANTIATE_ATTR(float)
RL_INSTANTIATE_ATTR(double)
#undef RL_INSTANTIATE_ATTR

}  // namespace rl

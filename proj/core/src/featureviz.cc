#include "robustlens/featureviz.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rl {

const char* viz_kind_name(VizKind kind) {
  switch (kind) {
    case VizKind::kActivationMax:
      return "activation_max";
    case VizKind::kActivationSetMax:
      return "activation_set_max";
    case VizKind::kRepresentationInvert:
      return "representation_invert";
    default:
      return "class_logit_max";
  }
}

const char* source_name(SourcePolicy policy) {
  switch (policy) {
    case SourcePolicy::kDatasetImage:
      return "dataset_image";
    case SourcePolicy::kRandomNoise:
      return "random_noise";
    default:
      return "mvn_sample";
  }
}

SourcePolicy parse_source(const std::string& name) {
  if (name == "dataset_image") return SourcePolicy::kDatasetImage;
  if (name == "random_noise") return SourcePolicy::kRandomNoise;
  if (name == "mvn_sample") return SourcePolicy::kMvnSample;
  throw ConfigError("unknown source policy '" + name + "'");
}

void VizOptimizer::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("visualisation epsilon must be > 0");
  if (!(step > 0.0)) throw ConfigError("visualisation step must be > 0");
  if (iterations < 0) throw ConfigError("visualisation iterations must be >= 0");
  if (clip && !(clip->lo < clip->hi)) throw ConfigError("visualisation pixel range is empty");
}

void to_json(nlohmann::json& j, const VizOptimizer& o) {
  j = {{"norm", norm_name(o.norm)}, {"epsilon", o.epsilon}, {"step", o.step}, {"iterations", o.iterations}};
  j["clip"] = o.clip ? nlohmann::json::array({o.clip->lo, o.clip->hi}) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, VizOptimizer& o) {
  o.norm = parse_norm(j.value("norm", std::string(norm_name(o.norm))));
  o.epsilon = j.value("epsilon", o.epsilon);
  o.step = j.value("step", o.step);
  o.iterations = j.value("iterations", o.iterations);
  if (j.contains("clip")) {
    if (j["clip"].is_null()) {
      o.clip.reset();
    } else {
      const auto r = j["clip"].get<std::vector<double>>();
      if (r.size() != 2) throw ConfigError("clip must be [lo, hi] or null");
      o.clip = PixelRange{r[0], r[1]};
    }
  }
}

nlohmann::json VizRun::summary() const {
  return {{"kind", viz_kind_name(kind)},
          {"units", units},
          {"target_class", target_class},
          {"initial_objective", initial_objective},
          {"final_objective", final_objective},
          {"best_iteration", best_iteration},
          {"maximize", maximize},
          {"stagnant", stagnant},
          {"seed", seed},
          {"trace", trace}};
}

std::vector<VizRun> optimize_rows(const RowObjective& objective, const Tensor<float>& sources,
                                  const VizOptimizer& optimizer, bool maximize) {
  optimizer.validate();
  if (sources.rank() < 2 || sources.dim(0) < 1) {
    throw DimensionError("visualisation sources must be a non-empty batch, got " + to_string(sources.shape()));
  }
  const Index rows = sources.dim(0);
  const Index n = sources.row_size();
  const float sigma = static_cast<float>(optimizer.step);
  const float sign = maximize ? 1.0f : -1.0f;

  std::vector<VizRun> runs(static_cast<std::size_t>(rows));
  std::vector<bool> moved(runs.size(), false);
  for (Index r = 0; r < rows; ++r) {
    auto& run = runs[static_cast<std::size_t>(r)];
    run.source = unstack_one(sources, r);
    run.image = run.source;
    run.maximize = maximize;
  }

  Tensor<float> delta(sources.shape());
  Tensor<float> current = sources;
  for (int k = 0; k <= optimizer.iterations; ++k) {
    Tape<float> tape;
    Var<float> x = tape.leaf(current, k < optimizer.iterations);
    Var<float> values = objective(x);
    if (values.shape() != Shape{rows}) {
      throw DimensionError("objective returned " + to_string(values.shape()) + " for " + std::to_string(rows) + " rows");
    }
    for (Index r = 0; r < rows; ++r) {
      auto& run = runs[static_cast<std::size_t>(r)];
      const double v = values.value()[r];
      run.trace.push_back(v);
      const bool better = k == 0 || (maximize ? v > run.final_objective : v < run.final_objective);
      if (better) {
        run.final_objective = v;
        run.best_iteration = k;
        auto row = current.row(r);
        std::copy(row.begin(), row.end(), run.image.data().begin());
      }
      if (k == 0) run.initial_objective = v;
    }
    if (k == optimizer.iterations) break;

    tape.backward(sum(values));
    const Tensor<float>& g = tape.grad(x);
    for (Index r = 0; r < rows; ++r) {
      auto d = delta.row(r);
      auto gr = g.row(r);
      if (optimizer.norm == Norm::kL2) {
        double sq = 0.0;
        for (float v : gr) sq += static_cast<double>(v) * v;
        if (sq == 0.0) continue;
        const float inv = static_cast<float>(1.0 / std::sqrt(sq));
        for (Index i = 0; i < n; ++i) d[i] += sign * sigma * gr[i] * inv;
      } else {
        bool any = false;
        for (Index i = 0; i < n; ++i) {
          const float s = static_cast<float>((gr[i] > 0.0f) - (gr[i] < 0.0f));
          any = any || s != 0.0f;
          d[i] += sign * sigma * s;
        }
        if (!any) continue;
      }
      moved[static_cast<std::size_t>(r)] = true;
      Tensor<float> projected = project(Tensor<float>({n}, std::vector<float>(d.begin(), d.end())), optimizer.norm,
                                        optimizer.epsilon);
      auto src = sources.row(r);
      auto cur = current.row(r);
      for (Index i = 0; i < n; ++i) {
        float v = src[i] + projected[i];
        if (optimizer.clip) {
          v = std::clamp(v, static_cast<float>(optimizer.clip->lo), static_cast<float>(optimizer.clip->hi));
        }
        cur[i] = v;
        // Keep the effective perturbation so clipping never leaves the ball.
        d[i] = v - src[i];
      }
    }
  }
  for (std::size_t r = 0; r < runs.size(); ++r) runs[r].stagnant = optimizer.iterations > 0 && !moved[r];
  return runs;
}

RowObjective activation_objective(const Network<float>& net, std::vector<std::vector<Index>> unit_sets) {
  const Index k = net.spec.representation_width();
  for (const auto& set : unit_sets) {
    if (set.empty()) throw ConfigError("activation set must not be empty");
    for (Index t : set) {
      if (t < 0 || t >= k) throw IndexError("unit " + std::to_string(t) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  return [&net, sets = std::move(unit_sets)](const Var<float>& batch) {
    const Index rows = batch.shape()[0];
    if (static_cast<Index>(sets.size()) != rows) throw DimensionError("one unit set per row required");
    Var<float> rep = trace_forward(net, batch, Mode::kEval).representation;
    std::size_t longest = 0;
    for (const auto& s : sets) longest = std::max(longest, s.size());
    // Column j of every row: the j-th unit of its set, or padding weight 0.
    std::optional<Var<float>> total;
    for (std::size_t j = 0; j < longest; ++j) {
      std::vector<int> index(sets.size());
      Tensor<float> weight({rows});
      for (std::size_t r = 0; r < sets.size(); ++r) {
        const bool has = j < sets[r].size();
        index[r] = static_cast<int>(has ? sets[r][j] : 0);
        weight[static_cast<Index>(r)] = has ? 1.0f / static_cast<float>(sets[r].size()) : 0.0f;
      }
      Var<float> term = mul(pick(rep, index), batch.tape().constant(weight));
      total = total ? add(*total, term) : term;
    }
    return *total;
  };
}

RowObjective inversion_objective(const Network<float>& net, const Tensor<float>& targets) {
  const Tensor<float> reps = predict_representation(net, targets);
  Tensor<float> inv_norm({reps.dim(0)});
  for (Index r = 0; r < reps.dim(0); ++r) {
    const float n = norm_of<float>(reps.row(r), Norm::kL2);
    if (!(n > 0.0f)) throw NumericError("target representation has zero norm; inversion objective undefined");
    inv_norm[r] = 1.0f / n;
  }
  return [&net, reps, inv_norm](const Var<float>& batch) {
    if (batch.shape()[0] != reps.dim(0)) throw DimensionError("one inversion target per row required");
    Var<float> rep = trace_forward(net, batch, Mode::kEval).representation;
    Var<float> dist = row_l2_norm(sub(rep, batch.tape().constant(reps)));
    return mul(dist, batch.tape().constant(inv_norm));
  };
}

RowObjective class_logit_objective(const Network<float>& net, std::vector<int> classes) {
  for (int c : classes) {
    if (c < 0 || c >= net.spec.num_classes) {
      throw IndexError("class " + std::to_string(c) + " outside [0, " + std::to_string(net.spec.num_classes) + ")");
    }
  }
  return [&net, cls = std::move(classes)](const Var<float>& batch) {
    if (static_cast<Index>(cls.size()) != batch.shape()[0]) throw DimensionError("one class per row required");
    return pick(trace_forward(net, batch, Mode::kEval).logits, cls);
  };
}

std::vector<VizRun> direct_feature_vis_batch(const Network<float>& net, const std::vector<std::vector<Index>>& units,
                                             const Tensor<float>& sources, const VizOptimizer& optimizer) {
  auto runs = optimize_rows(activation_objective(net, units), sources, optimizer, true);
  for (std::size_t r = 0; r < runs.size(); ++r) {
    runs[r].kind = units[r].size() == 1 ? VizKind::kActivationMax : VizKind::kActivationSetMax;
    runs[r].units = units[r];
  }
  return runs;
}

VizRun direct_feature_vis(const Network<float>& net, std::span<const Index> units, const Tensor<float>& source,
                          const VizOptimizer& optimizer) {
  return direct_feature_vis_batch(net, {std::vector<Index>(units.begin(), units.end())}, as_batch(source),
                                  optimizer)
      .front();
}

std::vector<VizRun> representation_inversion_batch(const Network<float>& net, const Tensor<float>& sources,
                                                   const Tensor<float>& targets, const VizOptimizer& optimizer) {
  if (sources.shape() != targets.shape()) {
    throw DimensionError("inversion sources " + to_string(sources.shape()) + " vs targets " +
                         to_string(targets.shape()));
  }
  auto runs = optimize_rows(inversion_objective(net, targets), sources, optimizer, false);
  for (auto& run : runs) run.kind = VizKind::kRepresentationInvert;
  return runs;
}

VizRun representation_inversion(const Network<float>& net, const Tensor<float>& source, const Tensor<float>& target,
                                const VizOptimizer& optimizer) {
  return representation_inversion_batch(net, as_batch(source), as_batch(target), optimizer).front();
}

std::vector<VizRun> class_specific_generation_batch(const Network<float>& net, std::span<const int> classes,
                                                    const Tensor<float>& sources, const VizOptimizer& optimizer) {
  auto runs = optimize_rows(class_logit_objective(net, {classes.begin(), classes.end()}), sources, optimizer, true);
  for (std::size_t r = 0; r < runs.size(); ++r) {
    runs[r].kind = VizKind::kClassLogitMax;
    runs[r].target_class = classes[r];
  }
  return runs;
}

VizRun class_specific_generation(const Network<float>& net, int target_class, const Tensor<float>& source,
                                 const VizOptimizer& optimizer) {
  const int cls[1] = {target_class};
  return class_specific_generation_batch(net, cls, as_batch(source), optimizer).front();
}

TopActivating top_activating_images(const Network<float>& net, const Dataset& data, Index unit, Index count) {
  const Index k = net.spec.representation_width();
  if (unit < 0 || unit >= k) throw IndexError("unit " + std::to_string(unit) + " outside [0, " + std::to_string(k) + ")");
  const Tensor<float> reps = predict_representation(net, data.images);
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  auto value = [&](Index i) { return reps[i * k + unit]; };
  auto id = [&](Index i) { return data.ids[static_cast<std::size_t>(i)]; };
  count = std::min(count, data.size());

  TopActivating out;
  auto by_max = order;
  std::sort(by_max.begin(), by_max.end(), [&](Index a, Index b) {
    return value(a) != value(b) ? value(a) > value(b) : id(a) < id(b);
  });
  auto by_min = order;
  std::sort(by_min.begin(), by_min.end(), [&](Index a, Index b) {
    return value(a) != value(b) ? value(a) < value(b) : id(a) < id(b);
  });
  for (Index i = 0; i < count; ++i) {
    out.max_ids.push_back(id(by_max[static_cast<std::size_t>(i)]));
    out.max_values.push_back(value(by_max[static_cast<std::size_t>(i)]));
    out.min_ids.push_back(id(by_min[static_cast<std::size_t>(i)]));
    out.min_values.push_back(value(by_min[static_cast<std::size_t>(i)]));
  }
  return out;
}

ClassSamplers::ClassSamplers(const Dataset& data, double ridge) {
  for (int c = 0; c < data.num_classes(); ++c) samplers_.emplace_back(mvn_fit(data.images_of_class(c)), ridge);
}

const MvnSampler& ClassSamplers::at(int label) const {
  if (label < 0 || label >= num_classes()) throw IndexError("no sampler for class " + std::to_string(label));
  return samplers_[static_cast<std::size_t>(label)];
}

Tensor<float> make_source(SourcePolicy policy, const Shape& sample_shape, std::uint64_t seed, const Dataset* data,
                          const ClassSamplers* samplers, int label) {
  std::mt19937_64 rng(seed);
  switch (policy) {
    case SourcePolicy::kRandomNoise: {
      std::uniform_real_distribution<float> u(0.0f, 1.0f);
      Tensor<float> out(sample_shape);
      for (float& v : out.data()) v = u(rng);
      return out;
    }
    case SourcePolicy::kDatasetImage: {
      if (data == nullptr || data->size() == 0) throw ConfigError("dataset_image source needs a dataset");
      std::vector<Index> pool;
      if (label >= 0) {
        pool = data->indices_of_class(label);
      } else {
        pool.resize(static_cast<std::size_t>(data->size()));
        std::iota(pool.begin(), pool.end(), Index{0});
      }
      if (pool.empty()) throw ConfigError("no dataset images of class " + std::to_string(label));
      std::uniform_int_distribution<std::size_t> pick_one(0, pool.size() - 1);
      return data->image(pool[pick_one(rng)]);
    }
    default:
      if (samplers == nullptr) throw ConfigError("mvn_sample source needs fitted class samplers");
      return samplers->at(label).sample(rng, sample_shape);
  }
}

}  // namespace rl

#include "robustlens/network.h"

#include <cmath>
#include <optional>
#include <random>

namespace rl {
namespace {

struct BlockLayout {
  std::string prefix;
  Index in_width;
  Index mid_width;
  Index out_width;
  Index stride;
  bool projection;
};

std::vector<BlockLayout> block_layout(const NetworkSpec& spec) {
  std::vector<BlockLayout> blocks;
  Index width = spec.stem_channels();
  for (std::size_t s = 0; s < spec.stage_widths.size(); ++s) {
    const Index mid = spec.stage_widths[s];
    const Index out = mid * spec.expansion();
    for (int b = 0; b < spec.blocks_per_stage[s]; ++b) {
      const Index stride = (s > 0 && b == 0) ? 2 : 1;
      blocks.push_back({"stage" + std::to_string(s + 1) + ".block" + std::to_string(b), width, mid,
                        out, stride, width != out || stride != 1});
      width = out;
    }
  }
  return blocks;
}

template <typename T>
class Initializer {
 public:
  Initializer(ParameterStore<T>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  void conv(const std::string& name, Index out, Index in, Index k) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
    store_.insert(name + ".weight", uniform(Shape{out, in, k, k}, bound), true);
  }

  void batchnorm(const std::string& name, Index channels) {
    store_.insert(name + ".gamma", Tensor<T>::ones({channels}), true);
    store_.insert(name + ".beta", Tensor<T>::zeros({channels}), true);
    store_.insert(name + ".running_mean", Tensor<T>::zeros({channels}), false);
    store_.insert(name + ".running_var", Tensor<T>::ones({channels}), false);
  }

  void dense(const std::string& name, Index out, Index in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    store_.insert(name + ".weight", uniform(Shape{out, in}, bound), true);
    store_.insert(name + ".bias", uniform(Shape{out}, bound), true);
  }

 private:
  Tensor<T> uniform(Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng_));
    return t;
  }

  ParameterStore<T>& store_;
  std::mt19937_64 rng_;
};

template <typename T>
class ForwardBuilder {
 public:
  ForwardBuilder(const Network<T>& net, Tape<T>& tape, Mode mode, bool track)
      : net_(net), tape_(tape), mode_(mode), track_(track) {}

  Var<T> param(const std::string& name) {
    if (auto it = trace_.parameters.find(name); it != trace_.parameters.end()) return it->second;
    Var<T> v = tape_.leaf(net_.params.at(name), track_);
    if (track_) trace_.parameters.emplace(name, v);
    return v;
  }

  Var<T> conv(const Var<T>& x, const std::string& name, Index stride) {
    const Index k = net_.params.at(name + ".weight").dim(2);
    return conv2d(x, param(name + ".weight"), std::optional<Var<T>>{}, {stride, k / 2});
  }

  Var<T> bn(const Var<T>& x, const std::string& name) {
    const auto& rm = net_.params.at(name + ".running_mean");
    const auto& rv = net_.params.at(name + ".running_var");
    auto result = batchnorm2d(x, param(name + ".gamma"), param(name + ".beta"), rm.data(), rv.data(),
                              mode_ == Mode::kTrain ? BatchNormMode::kTrain : BatchNormMode::kEval);
    if (mode_ == Mode::kTrain) {
      trace_.batch_statistics.push_back(
          {name, std::move(result.batch_mean), std::move(result.batch_var)});
    }
    return result.output;
  }

  Var<T> block(const Var<T>& x, const BlockLayout& b, BlockType type) {
    const std::string& p = b.prefix;
    Var<T> h;
    if (type == BlockType::kBasic) {
      h = relu(bn(conv(x, p + ".conv1", b.stride), p + ".bn1"));
      h = bn(conv(h, p + ".conv2", 1), p + ".bn2");
    } else {
      h = relu(bn(conv(x, p + ".conv1", 1), p + ".bn1"));
      h = relu(bn(conv(h, p + ".conv2", b.stride), p + ".bn2"));
      h = bn(conv(h, p + ".conv3", 1), p + ".bn3");
    }
    Var<T> skip = b.projection ? bn(conv(x, p + ".shortcut.conv", b.stride), p + ".shortcut.bn") : x;
    return relu(h + skip);
  }

  ForwardTrace<T> run(const Var<T>& input) {
    const NetworkSpec& spec = net_.spec;
    const Shape& s = input.shape();
    if (s.size() != 4 || s[1] != spec.channels || s[2] != spec.height || s[3] != spec.width) {
      throw DimensionError("network input " + to_string(s) + " does not match spec input [N," +
                           std::to_string(spec.channels) + "," + std::to_string(spec.height) + "," +
                           std::to_string(spec.width) + "]");
    }
    Var<T> h = relu(bn(conv(input, "stem.conv", 1), "stem.bn"));
    for (const auto& b : block_layout(spec)) h = block(h, b, spec.block);
    trace_.representation = global_avg_pool(h);
    trace_.logits = linear(trace_.representation, param("fc.weight"), std::optional<Var<T>>(param("fc.bias")));
    return std::move(trace_);
  }

 private:
  const Network<T>& net_;
  Tape<T>& tape_;
  Mode mode_;
  bool track_;
  ForwardTrace<T> trace_;
};

const char* block_name(BlockType t) { return t == BlockType::kBasic ? "basic" : "bottleneck"; }

}  // namespace

NetworkSpec NetworkSpec::micro_resnet(int num_classes) {
  NetworkSpec spec;
  spec.num_classes = num_classes;
  return spec;
}

NetworkSpec NetworkSpec::resnet50(int num_classes) {
  NetworkSpec spec;
  spec.height = spec.width = 128;
  spec.num_classes = num_classes;
  spec.block = BlockType::kBottleneck;
  spec.stem_width = 64;
  spec.stage_widths = {64, 128, 256, 512};
  spec.blocks_per_stage = {3, 4, 6, 3};
  return spec;
}

void NetworkSpec::validate() const {
  if (channels < 1 || height < 1 || width < 1) throw ConfigError("network input extents must be positive");
  if (num_classes < 1) throw ConfigError("network needs at least one class");
  if (stage_widths.empty() || stage_widths.size() != blocks_per_stage.size()) {
    throw ConfigError("stage_widths and blocks_per_stage must be non-empty and of equal length");
  }
  for (Index w : stage_widths) {
    if (w < 1) throw ConfigError("stage widths must be positive");
  }
  for (int b : blocks_per_stage) {
    if (b < 1) throw ConfigError("blocks per stage must be positive");
  }
  if (stem_width < 0) throw ConfigError("stem width must be non-negative");
}

void to_json(nlohmann::json& j, const NetworkSpec& spec) {
  j = nlohmann::json{{"input_shape", {spec.channels, spec.height, spec.width}},
                     {"num_classes", spec.num_classes},
                     {"block", block_name(spec.block)},
                     {"stem_width", spec.stem_width},
                     {"stage_widths", spec.stage_widths},
                     {"blocks_per_stage", spec.blocks_per_stage},
                     {"representation_width", spec.representation_width()}};
}

void from_json(const nlohmann::json& j, NetworkSpec& spec) {
  const auto shape = j.at("input_shape").get<std::vector<Index>>();
  if (shape.size() != 3) throw ConfigError("input_shape must have three extents");
  spec.channels = shape[0];
  spec.height = shape[1];
  spec.width = shape[2];
  spec.num_classes = j.at("num_classes").get<int>();
  const auto block = j.at("block").get<std::string>();
  if (block == "basic") {
    spec.block = BlockType::kBasic;
  } else if (block == "bottleneck") {
    spec.block = BlockType::kBottleneck;
  } else {
    throw ConfigError("unknown block type '" + block + "'");
  }
  spec.stem_width = j.value("stem_width", Index{0});
  spec.stage_widths = j.at("stage_widths").get<std::vector<Index>>();
  spec.blocks_per_stage = j.at("blocks_per_stage").get<std::vector<int>>();
  spec.validate();
}

template <typename T>
void ParameterStore<T>::insert(const std::string& name, Tensor<T> value, bool trainable) {
  entries_[name] = Entry{std::move(value), trainable};
}

template <typename T>
const Tensor<T>& ParameterStore<T>::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IndexError("no parameter named '" + name + "'");
  return it->second.value;
}

template <typename T>
Tensor<T>& ParameterStore<T>::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IndexError("no parameter named '" + name + "'");
  return it->second.value;
}

template <typename T>
bool ParameterStore<T>::trainable(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IndexError("no parameter named '" + name + "'");
  return it->second.trainable;
}

template <typename T>
Index ParameterStore<T>::parameter_count(bool trainable_only) const {
  Index total = 0;
  for (const auto& [name, entry] : entries_) {
    if (!trainable_only || entry.trainable) total += entry.value.size();
  }
  return total;
}

template <typename T>
std::vector<std::string> ParameterStore<T>::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, entry] : entries_) out.push_back(name);
  return out;
}

template <typename T>
Network<T> build_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Network<T> net{spec, {}};
  Initializer<T> init(net.params, seed);
  init.conv("stem.conv", spec.stem_channels(), spec.channels, 3);
  init.batchnorm("stem.bn", spec.stem_channels());
  for (const auto& b : block_layout(spec)) {
    const std::string& p = b.prefix;
    if (spec.block == BlockType::kBasic) {
      init.conv(p + ".conv1", b.out_width, b.in_width, 3);
      init.batchnorm(p + ".bn1", b.out_width);
      init.conv(p + ".conv2", b.out_width, b.out_width, 3);
      init.batchnorm(p + ".bn2", b.out_width);
    } else {
      init.conv(p + ".conv1", b.mid_width, b.in_width, 1);
      init.batchnorm(p + ".bn1", b.mid_width);
      init.conv(p + ".conv2", b.mid_width, b.mid_width, 3);
      init.batchnorm(p + ".bn2", b.mid_width);
      init.conv(p + ".conv3", b.out_width, b.mid_width, 1);
      init.batchnorm(p + ".bn3", b.out_width);
    }
    if (b.projection) {
      init.conv(p + ".shortcut.conv", b.out_width, b.in_width, 1);
      init.batchnorm(p + ".shortcut.bn", b.out_width);
    }
  }
  init.dense("fc", spec.num_classes, spec.representation_width());
  return net;
}

template <typename T>
ForwardTrace<T> trace_forward(const Network<T>& net, const Var<T>& input, Mode mode,
                              bool track_parameters) {
  return ForwardBuilder<T>(net, input.tape(), mode, track_parameters).run(input);
}

template <typename T>
Tensor<T> forward_logits(const Network<T>& net, const Tensor<T>& x, Mode mode) {
  Tape<T> tape;
  auto trace = trace_forward(net, tape.constant(x), mode);
  return trace.logits.value();
}

template <typename T>
Tensor<T> forward_representation(const Network<T>& net, const Tensor<T>& x, Mode mode) {
  Tape<T> tape;
  auto trace = trace_forward(net, tape.constant(x), mode);
  return trace.representation.value();
}

namespace {

template <typename T, typename Fn>
Tensor<T> chunked(const Tensor<T>& images, Index chunk, Index width, Fn fn) {
  const Index n = images.dim(0);
  Tensor<T> out(Shape{n, width});
  for (Index begin = 0; begin < n; begin += chunk) {
    const Index end = std::min(n, begin + chunk);
    Tensor<T> part = fn(slice_rows(images, begin, end));
    std::copy(part.data().begin(), part.data().end(), out.data().begin() + begin * width);
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> predict_logits(const Network<T>& net, const Tensor<T>& images, Index chunk) {
  return chunked(images, chunk, net.spec.num_classes,
                 [&](const Tensor<T>& part) { return forward_logits(net, part, Mode::kEval); });
}

template <typename T>
Tensor<T> predict_representation(const Network<T>& net, const Tensor<T>& images, Index chunk) {
  return chunked(images, chunk, net.spec.representation_width(),
                 [&](const Tensor<T>& part) { return forward_representation(net, part, Mode::kEval); });
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const Index n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const T* row = logits.raw() + r * c;
    out[r] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

template <typename T>
void apply_batch_statistics(Network<T>& net, const std::vector<RunningStatUpdate<T>>& stats,
                            T momentum) {
  for (const auto& s : stats) {
    auto& rm = net.params.at(s.prefix + ".running_mean");
    auto& rv = net.params.at(s.prefix + ".running_var");
    for (std::size_t c = 0; c < s.mean.size(); ++c) {
      rm[c] = (T{1} - momentum) * rm[c] + momentum * s.mean[c];
      rv[c] = (T{1} - momentum) * rv[c] + momentum * s.var[c];
    }
  }
}

#define RL_INSTANTIATE_NETWORK(T)                                                              \
  template class ParameterStore<T>;                                                            \
  template Network<T> build_network<T>(const NetworkSpec&, std::uint64_t);                     \
  template ForwardTrace<T> trace_forward(const Network<T>&, const Var<T>&, Mode, bool);        \
  template Tensor<T> forward_logits(const Network<T>&, const Tensor<T>&, Mode);                \
  template Tensor<T> forward_representation(const Network<T>&, const Tensor<T>&, Mode);       \
  template Tensor<T> predict_logits(const Network<T>&, const Tensor<T>&, Index);               \
  template Tensor<T> predict_representation(const Network<T>&, const Tensor<T>&, Index);       \
  template std::vector<int> argmax_rows(const Tensor<T>&);                                     \
  template void apply_batch_statistics(Network<T>&, const std::vector<RunningStatUpdate<T>>&, T);

RL_INSTANTIATE_NETWORK(float)
RL_INSTANTIATE_NETWORK(double)

#undef RL_INSTANTIATE_NETWORK

}  // namespace rl

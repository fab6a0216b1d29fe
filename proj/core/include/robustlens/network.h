#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "robustlens/ops.h"

namespace rl {

enum class BlockType { kBasic, kBottleneck };
enum class Mode { kTrain, kEval };

// Residual classifier architecture: a 3x3 stem, stages of residual blocks
// (the first block of every stage after the first downsamples by 2), global
// average pooling to the representation R(x), then a linear classifier.
struct NetworkSpec {
  Index channels = 3;
  Index height = 32;
  Index width = 32;
  int num_classes = 4;
  BlockType block = BlockType::kBasic;
  // Stem output width; 0 means "same as the first stage".
  Index stem_width = 0;
  // Basic blocks: output width per stage. Bottleneck blocks: inner width per
  // stage; the stage output is four times wider.
  std::vector<Index> stage_widths{16, 32, 64};
  std::vector<int> blocks_per_stage{2, 2, 2};

  // 3 stages of 2 basic blocks, widths 16/32/64, 32x32 RGB input.
  static NetworkSpec micro_resnet(int num_classes = 4);
  // Bottleneck ResNet50 layout for 128x128 inputs.
  static NetworkSpec resnet50(int num_classes = 150);

  Index expansion() const { return block == BlockType::kBottleneck ? 4 : 1; }
  Index stem_channels() const { return stem_width > 0 ? stem_width : stage_widths.at(0); }
  Index representation_width() const { return stage_widths.back() * expansion(); }
  Shape input_shape() const { return {channels, height, width}; }
  void validate() const;

  bool operator==(const NetworkSpec&) const = default;
};

void to_json(nlohmann::json& j, const NetworkSpec& spec);
void from_json(const nlohmann::json& j, NetworkSpec& spec);

// Named weights. Running batchnorm statistics are stored alongside the
// trainable tensors but flagged non-trainable.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    Tensor<T> value;
    bool trainable = true;
    bool operator==(const Entry&) const = default;
  };

  void insert(const std::string& name, Tensor<T> value, bool trainable);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor<T>& at(const std::string& name) const;
  Tensor<T>& at(const std::string& name);
  bool trainable(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  Index parameter_count(bool trainable_only = true) const;
  std::vector<std::string> names() const;

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [name, entry] : entries_) out.insert(name, entry.value.template cast<U>(), entry.trainable);
    return out;
  }

  bool operator==(const ParameterStore&) const = default;

 private:
  std::map<std::string, Entry> entries_;
};

template <typename T>
struct Network {
  NetworkSpec spec;
  ParameterStore<T> params;

  template <typename U>
  Network<U> cast() const {
    return Network<U>{spec, params.template cast<U>()};
  }
  bool operator==(const Network&) const = default;
};

// Deterministic initialisation: He-uniform convolutions, 1/sqrt(fan_in)
// uniform classifier, gamma=1, beta=0, running mean 0, running variance 1.
template <typename T>
Network<T> build_network(const NetworkSpec& spec, std::uint64_t seed);

template <typename T>
struct RunningStatUpdate {
  std::string prefix;  // e.g. "stage1.block0.bn1"
  std::vector<T> mean;
  std::vector<T> var;
};

template <typename T>
struct ForwardTrace {
  Var<T> logits;
  Var<T> representation;
  // Trainable parameters as tape leaves (only when tracked).
  std::map<std::string, Var<T>> parameters;
  // Train-mode batch statistics, one entry per batchnorm layer.
  std::vector<RunningStatUpdate<T>> batch_statistics;
};

// Records a forward pass of `net` on `input` ([N,C,H,W]) onto the input's tape.
template <typename T>
ForwardTrace<T> trace_forward(const Network<T>& net, const Var<T>& input, Mode mode,
                              bool track_parameters = false);

// Logits F(x) for a batch.
template <typename T>
Tensor<T> forward_logits(const Network<T>& net, const Tensor<T>& x, Mode mode = Mode::kEval);

// Penultimate representation R(x) for a batch ([N, k]).
template <typename T>
Tensor<T> forward_representation(const Network<T>& net, const Tensor<T>& x, Mode mode = Mode::kEval);

// Eval-mode logits over an arbitrarily large batch, `chunk` images at a time.
template <typename T>
Tensor<T> predict_logits(const Network<T>& net, const Tensor<T>& images, Index chunk = 128);

// Eval-mode representations over an arbitrarily large batch.
template <typename T>
Tensor<T> predict_representation(const Network<T>& net, const Tensor<T>& images, Index chunk = 128);

// Argmax over each row of [N,C] logits.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

// Exponential moving average of batch statistics into the running buffers.
template <typename T>
void apply_batch_statistics(Network<T>& net, const std::vector<RunningStatUpdate<T>>& stats,
                            T momentum);

}  // namespace rl

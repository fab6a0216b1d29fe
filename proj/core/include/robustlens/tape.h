#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string_view>
#include <vector>

#include "robustlens/tensor.h"

namespace rl {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
// lives and has not been reset.
template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// View handed to an op's backward rule.
template <typename T>
class BackwardContext {
 public:
  const Tensor<T>& output() const { return *output_; }
  const Tensor<T>& output_grad() const { return *output_grad_; }
  std::size_t num_inputs() const { return inputs_.size(); }
  const Tensor<T>& input(std::size_t i) const { return *inputs_[i]; }
  // Accumulator for input `i`, or nullptr when that input is not tracked.
  Tensor<T>* input_grad(std::size_t i) const { return input_grads_[i]; }

 private:
  friend class Tape<T>;
  const Tensor<T>* output_ = nullptr;
  const Tensor<T>* output_grad_ = nullptr;
  std::vector<const Tensor<T>*> inputs_;
  std::vector<Tensor<T>*> input_grads_;
};

// Linear record of a forward computation. Nodes are appended in evaluation
// order, so reverse insertion order is a valid topological order for
// backward. A tape supports one backward pass per recording.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const BackwardContext<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Appends an op output. `backward` is dropped when no input is tracked.
  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward);

  const Tensor<T>& value(const Var<T>& v) const;
  // Gradient of the last backward pass. Retained for leaves only.
  const Tensor<T>& grad(const Var<T>& v) const;
  bool requires_grad(const Var<T>& v) const;
  std::string_view op(const Var<T>& v) const;

  void backward(const Var<T>& loss);
  void zero_grad();
  void reset();

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  const Node& node(const Var<T>& v) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace rl

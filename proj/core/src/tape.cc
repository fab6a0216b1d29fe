#include "robustlens/tape.h"

#include <sstream>

namespace rl {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  if (consumed_) throw StateError("tape already consumed by backward; reset before recording");
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       BackwardFn backward) {
  if (consumed_) throw StateError("tape already consumed by backward; reset before recording");
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (const Var<T>& in : inputs) {
    if (&in.tape() != this) throw StateError(std::string(op) + ": input recorded on another tape");
    n.inputs.push_back(in.id());
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(const Var<T>& v) const {
  if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size()) {
    throw StateError("variable does not belong to this tape");
  }
  return nodes_[v.id()];
}

template <typename T>
const Tensor<T>& Tape<T>::value(const Var<T>& v) const {
  return node(v).value;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(const Var<T>& v) const {
  const Node& n = node(v);
  if (!n.requires_grad) throw StateError("gradient requested for an untracked value");
  if (!n.is_leaf) throw StateError("gradients are retained for leaves only");
  if (!consumed_) throw StateError("gradient requested before backward");
  return n.grad;
}

template <typename T>
bool Tape<T>::requires_grad(const Var<T>& v) const {
  return node(v).requires_grad;
}

template <typename T>
std::string_view Tape<T>::op(const Var<T>& v) const {
  return node(v).op;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  const Node& root = node(loss);
  if (consumed_) throw StateError("backward called twice on one recording");
  if (root.value.size() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " + to_string(root.value.shape()));
  }
  for (Node& n : nodes_) {
    if (n.is_leaf && n.requires_grad) n.grad = Tensor<T>::zeros(n.value.shape());
  }
  consumed_ = true;
  if (!root.requires_grad) return;

  nodes_[loss.id()].grad = Tensor<T>::full(root.value.shape(), T{1});
  BackwardContext<T> ctx;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.is_leaf || !n.backward || n.grad.empty()) continue;
    ctx.output_ = &n.value;
    ctx.output_grad_ = &n.grad;
    ctx.inputs_.clear();
    ctx.input_grads_.clear();
    for (std::size_t in : n.inputs) {
      Node& src = nodes_[in];
      ctx.inputs_.push_back(&src.value);
      if (src.requires_grad) {
        if (src.grad.empty()) src.grad = Tensor<T>::zeros(src.value.shape());
        ctx.input_grads_.push_back(&src.grad);
      } else {
        ctx.input_grads_.push_back(nullptr);
      }
    }
    n.backward(ctx);
    n.grad = Tensor<T>();
  }
}

template <typename T>
void Tape<T>::zero_grad() {
  for (Node& n : nodes_) {
    if (!n.grad.empty()) n.grad.fill(T{0});
  }
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  consumed_ = false;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace rl

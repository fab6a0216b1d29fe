#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "robustlens/errors.h"

namespace rl {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape);

// Dense row-major array. Element type is float for training and double for
// verification work.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(checked_numel(shape_)), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != static_cast<Index>(data_.size())) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + to_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  // Number of elements per leading-axis slice.
  Index row_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : size() / shape_[0]; }

  std::span<T> row(Index i) {
    const Index n = row_size();
    return std::span<T>(data_).subspan(static_cast<std::size_t>(i * n), static_cast<std::size_t>(n));
  }
  std::span<const T> row(Index i) const {
    const Index n = row_size();
    return std::span<const T>(data_).subspan(static_cast<std::size_t>(i * n),
                                             static_cast<std::size_t>(n));
  }

  Tensor reshaped(Shape shape) const {
    if (checked_numel(shape) != size()) {
      throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  static Index checked_numel(const Shape& shape) {
    for (Index extent : shape) {
      if (extent < 0) throw DimensionError("negative extent in shape " + to_string(shape));
    }
    return numel(shape);
  }

  Shape shape_;
  std::vector<T> data_;
};

// Stacks equally shaped samples along a new leading axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> samples) {
  if (samples.empty()) throw DimensionError("stack of zero tensors");
  Shape shape = samples.front().shape();
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(numel(shape)) * samples.size());
  for (const auto& s : samples) {
    if (s.shape() != shape) {
      throw DimensionError("stack: shape " + to_string(s.shape()) + " vs " + to_string(shape));
    }
    data.insert(data.end(), s.data().begin(), s.data().end());
  }
  shape.insert(shape.begin(), static_cast<Index>(samples.size()));
  return Tensor<T>(std::move(shape), std::move(data));
}

// Copies slice `i` of the leading axis out as a standalone sample.
template <typename T>
Tensor<T> unstack_one(const Tensor<T>& batch, Index i) {
  Shape shape(batch.shape().begin() + 1, batch.shape().end());
  auto row = batch.row(i);
  return Tensor<T>(std::move(shape), std::vector<T>(row.begin(), row.end()));
}

// Rows [begin, end) of the leading axis.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& batch, Index begin, Index end) {
  Shape shape = batch.shape();
  const Index n = batch.row_size();
  shape[0] = end - begin;
  return Tensor<T>(std::move(shape), std::vector<T>(batch.data().begin() + begin * n,
                                                    batch.data().begin() + end * n));
}

// Adds a leading axis of extent 1.
template <typename T>
Tensor<T> as_batch(const Tensor<T>& sample) {
  Shape shape = sample.shape();
  shape.insert(shape.begin(), 1);
  return sample.reshaped(std::move(shape));
}

}  // namespace rl

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "robustlens/tensor.h"

namespace rl {

enum class Split { kTrain, kTest };

const char* split_name(Split split);

// Labelled images, channel-planar [N,C,H,W] with values in [0,1].
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  Split split = Split::kTrain;
  // Stable per-sample identifiers; survive subsetting and reordering.
  std::vector<Index> ids;

  Index size() const { return static_cast<Index>(labels.size()); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  // Throws FormatError when labels, ids and images disagree.
  void validate() const;
  Dataset subset(std::span<const Index> indices) const;
  Dataset head(Index count) const;
  std::vector<Index> indices_of_class(int label) const;
  Tensor<float> image(Index i) const { return unstack_one(images, i); }
  // Images of one class, stacked.
  Tensor<float> images_of_class(int label) const;
  // SHA-256 over shape, pixels, labels and ids (hex).
  std::string hash() const;
};

inline constexpr Index kCifarImageBytes = 3 * 32 * 32;
inline constexpr Index kCifarRecordBytes = kCifarImageBytes + 1;

// CIFAR-10 binary batch: 3073-byte records, one label byte then the red,
// green and blue 32x32 planes.
Dataset load_cifar10(const std::filesystem::path& path, Split split = Split::kTrain);
Dataset load_cifar10(std::span<const std::filesystem::path> paths, Split split = Split::kTrain);
std::vector<std::string> cifar10_class_names();

// Same record layout generalised to any [C,H,W] sample shape; with
// [3,32,32] the files are byte-identical to CIFAR-10 batches.
Dataset decode_records(std::span<const std::uint8_t> bytes, const Shape& sample_shape,
                       std::vector<std::string> class_names, Split split);
std::vector<std::uint8_t> encode_records(const Dataset& dataset);

// Record file plus a JSON sidecar (<stem>.json) describing the shape and
// class names.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct SyntheticOptions {
  int classes = 4;
  Index per_class = 100;
  Index size = 32;
  std::uint64_t seed = 0;
  Split split = Split::kTrain;
  double noise = 0.08;
};

// Coloured geometric shapes (circle, square, triangle, cross, ring, diamond)
// with random position, scale and colours over a noisy background. The
// class is the shape identity.
Dataset generate_synthetic(const SyntheticOptions& options);
std::vector<std::string> synthetic_class_names(int classes);

}  // namespace rl

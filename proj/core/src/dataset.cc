#include "robustlens/dataset.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "robustlens/hashing.h"

namespace rl {

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

std::uint8_t quantize(float v) {
  const float clamped = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "test") return Split::kTest;
  throw FormatError("unknown split '" + name + "'");
}

std::filesystem::path sidecar_of(const std::filesystem::path& path) {
  auto side = path;
  side.replace_extension(".json");
  return side;
}

// Shape membership in coordinates scaled so the shape fits the unit disc.
bool inside(int shape, double u, double v) {
  switch (shape) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return std::max(std::abs(u), std::abs(v)) <= 0.78;
    case 2:
      return v >= -0.9 && v <= 0.8 && std::abs(u) <= 0.95 * (v + 0.9) / 1.7;
    case 3:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case 4: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    default:
      return std::abs(u) + std::abs(v) <= 1.0;
  }
}

}  // namespace

const char* split_name(Split split) { return split == Split::kTrain ? "train" : "test"; }

void Dataset::validate() const {
  if (images.rank() != 4) throw FormatError("dataset images must be [N,C,H,W], got " + to_string(images.shape()));
  if (images.dim(0) != size()) {
    throw FormatError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                      std::to_string(size()) + " labels");
  }
  if (static_cast<Index>(ids.size()) != size()) throw FormatError("dataset id count differs from label count");
  for (int label : labels) {
    if (label < 0 || label >= num_classes()) {
      throw FormatError("label " + std::to_string(label) + " outside [0, " + std::to_string(num_classes()) + ")");
    }
  }
}

Dataset Dataset::subset(std::span<const Index> indices) const {
  Dataset out;
  out.class_names = class_names;
  out.split = split;
  Shape shape = images.shape();
  shape[0] = static_cast<Index>(indices.size());
  const Index n = images.row_size();
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(n) * indices.size());
  for (Index i : indices) {
    if (i < 0 || i >= size()) throw IndexError("dataset index " + std::to_string(i) + " out of range");
    auto r = images.row(i);
    data.insert(data.end(), r.begin(), r.end());
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
    out.ids.push_back(ids[static_cast<std::size_t>(i)]);
  }
  out.images = Tensor<float>(std::move(shape), std::move(data));
  return out;
}

Dataset Dataset::head(Index count) const {
  std::vector<Index> idx(static_cast<std::size_t>(std::min(count, size())));
  std::iota(idx.begin(), idx.end(), Index{0});
  return subset(idx);
}

std::vector<Index> Dataset::indices_of_class(int label) const {
  std::vector<Index> out;
  for (Index i = 0; i < size(); ++i) {
    if (labels[static_cast<std::size_t>(i)] == label) out.push_back(i);
  }
  return out;
}

Tensor<float> Dataset::images_of_class(int label) const {
  if (label < 0 || label >= num_classes()) throw IndexError("class " + std::to_string(label) + " out of range");
  return subset(indices_of_class(label)).images;
}

std::string Dataset::hash() const {
  Sha256 h;
  h.update_values(std::span<const Index>(images.shape()));
  h.update_values(images.data());
  h.update_values(std::span<const int>(labels));
  h.update_values(std::span<const Index>(ids));
  return h.hex_digest();
}

std::vector<std::string> cifar10_class_names() {
  return {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};
}

Dataset decode_records(std::span<const std::uint8_t> bytes, const Shape& sample_shape,
                       std::vector<std::string> class_names, Split split) {
  const Index pixels = numel(sample_shape);
  const Index record = pixels + 1;
  if (sample_shape.size() != 3 || pixels <= 0) throw FormatError("record sample shape must be [C,H,W]");
  const auto total = static_cast<Index>(bytes.size());
  if (total % record != 0) {
    throw FormatError("record stream of " + std::to_string(total) + " bytes is not a multiple of " +
                      std::to_string(record) + "; trailing partial record at offset " +
                      std::to_string(total - total % record));
  }
  const Index count = total / record;
  Dataset out;
  out.class_names = std::move(class_names);
  out.split = split;
  Shape shape = sample_shape;
  shape.insert(shape.begin(), count);
  std::vector<float> data(static_cast<std::size_t>(count * pixels));
  for (Index i = 0; i < count; ++i) {
    const std::uint8_t* rec = bytes.data() + i * record;
    if (rec[0] >= out.class_names.size()) {
      throw FormatError("label " + std::to_string(rec[0]) + " at offset " + std::to_string(i * record) +
                        " exceeds class count " + std::to_string(out.class_names.size()));
    }
    out.labels.push_back(rec[0]);
    out.ids.push_back(i);
    for (Index p = 0; p < pixels; ++p) data[static_cast<std::size_t>(i * pixels + p)] = rec[1 + p] / 255.0f;
  }
  out.images = Tensor<float>(std::move(shape), std::move(data));
  return out;
}

std::vector<std::uint8_t> encode_records(const Dataset& dataset) {
  dataset.validate();
  if (dataset.num_classes() > 256) throw FormatError("record format holds at most 256 classes");
  const Index pixels = dataset.images.row_size();
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(dataset.size() * (pixels + 1)));
  for (Index i = 0; i < dataset.size(); ++i) {
    out.push_back(static_cast<std::uint8_t>(dataset.labels[static_cast<std::size_t>(i)]));
    for (float v : dataset.images.row(i)) out.push_back(quantize(v));
  }
  return out;
}

Dataset load_cifar10(const std::filesystem::path& path, Split split) {
  return decode_records(read_bytes(path), {3, 32, 32}, cifar10_class_names(), split);
}

Dataset load_cifar10(std::span<const std::filesystem::path> paths, Split split) {
  std::vector<std::uint8_t> all;
  for (const auto& p : paths) {
    auto bytes = read_bytes(p);
    if (bytes.size() % kCifarRecordBytes != 0) {
      throw FormatError(p.string() + ": length " + std::to_string(bytes.size()) + " not a multiple of " +
                        std::to_string(kCifarRecordBytes) + "; partial record at offset " +
                        std::to_string(bytes.size() - bytes.size() % kCifarRecordBytes));
    }
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  return decode_records(all, {3, 32, 32}, cifar10_class_names(), split);
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  write_bytes(path, encode_records(dataset));
  nlohmann::json side = {
      {"format", "robustlens-records"},
      {"version", 1},
      {"sample_shape", dataset.sample_shape()},
      {"count", dataset.size()},
      {"class_names", dataset.class_names},
      {"split", split_name(dataset.split)},
      {"ids", dataset.ids},
  };
  std::ofstream out(sidecar_of(path));
  if (!out) throw FormatError("cannot write " + sidecar_of(path).string());
  out << side.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(sidecar_of(path));
  if (!in) throw FormatError("missing sidecar " + sidecar_of(path).string());
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(sidecar_of(path).string() + ": " + e.what());
  }
  Dataset out = decode_records(read_bytes(path), side.at("sample_shape").get<Shape>(),
                               side.at("class_names").get<std::vector<std::string>>(),
                               parse_split(side.value("split", "train")));
  if (side.contains("ids")) {
    auto ids = side.at("ids").get<std::vector<Index>>();
    if (static_cast<Index>(ids.size()) != out.size()) throw FormatError("sidecar id count does not match records");
    out.ids = std::move(ids);
  }
  return out;
}

std::vector<std::string> synthetic_class_names(int classes) {
  static const std::vector<std::string> kNames{"circle", "square", "triangle", "cross", "ring", "diamond"};
  if (classes < 1 || classes > static_cast<int>(kNames.size())) {
    throw ConfigError("synthetic dataset supports 1 to " + std::to_string(kNames.size()) + " classes");
  }
  return {kNames.begin(), kNames.begin() + classes};
}

Dataset generate_synthetic(const SyntheticOptions& options) {
  if (options.per_class < 1) throw ConfigError("per_class must be at least 1");
  if (options.size < 8) throw ConfigError("synthetic images must be at least 8 pixels wide");
  if (options.noise < 0) throw ConfigError("noise must be non-negative");
  Dataset out;
  out.class_names = synthetic_class_names(options.classes);
  out.split = options.split;
  const Index s = options.size;
  const Index count = options.per_class * options.classes;
  const Index plane = s * s;
  std::vector<float> data(static_cast<std::size_t>(count * 3 * plane));
  constexpr int kSuper = 4;

  for (Index i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % options.classes);
    std::seed_seq seq{static_cast<std::uint64_t>(options.seed), static_cast<std::uint64_t>(options.split),
                      static_cast<std::uint64_t>(i)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const double radius = s * (0.26 + 0.14 * unit(rng));
    const double cx = radius + (s - 2 * radius) * unit(rng);
    const double cy = radius + (s - 2 * radius) * unit(rng);
    double fg[3], bg[3];
    for (int c = 0; c < 3; ++c) {
      bg[c] = 0.4 * unit(rng);
      fg[c] = 0.6 + 0.4 * unit(rng);
    }
    if (unit(rng) < 0.5) {
      for (int c = 0; c < 3; ++c) {
        bg[c] = 1.0 - bg[c];
        fg[c] = 1.0 - fg[c];
      }
    }

    float* img = data.data() + i * 3 * plane;
    for (Index y = 0; y < s; ++y) {
      for (Index x = 0; x < s; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = x + (sx + 0.5) / kSuper;
            const double py = y + (sy + 0.5) / kSuper;
            hits += inside(label, (px - cx) / radius, (py - cy) / radius) ? 1 : 0;
          }
        }
        const double cover = static_cast<double>(hits) / (kSuper * kSuper);
        for (int c = 0; c < 3; ++c) {
          const double v = cover * fg[c] + (1.0 - cover) * bg[c] + options.noise * gauss(rng);
          // Quantised to 8 bits so record files round-trip exactly.
          img[c * plane + y * s + x] = quantize(static_cast<float>(v)) / 255.0f;
        }
      }
    }
    out.labels.push_back(label);
    out.ids.push_back(i);
  }
  out.images = Tensor<float>({count, 3, s, s}, std::move(data));
  return out;
}

}  // namespace rl

#include "robustlens/image_io.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include <spdlog/spdlog.h>

namespace rl {

std::vector<std::uint8_t> encode_ppm(const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1)) {
    throw DimensionError("PPM images must be [3,H,W] or [1,H,W], got " + to_string(image.shape()));
  }
  const Index channels = image.dim(0);
  const Index h = image.dim(1);
  const Index w = image.dim(2);
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + static_cast<std::size_t>(3 * h * w));
  Index clipped = 0;
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (Index c = 0; c < 3; ++c) {
        float v = image[(channels == 3 ? c : 0) * h * w + y * w + x];
        if (!(v >= 0.0f && v <= 1.0f)) {
          ++clipped;
          v = std::isnan(v) ? 0.0f : std::clamp(v, 0.0f, 1.0f);
        }
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
      }
    }
  }
  if (clipped > 0) spdlog::warn("PPM encode clipped {} values outside [0,1]", clipped);
  return out;
}

Tensor<float> decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string token;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) token.push_back(static_cast<char>(bytes[pos++]));
    if (token.empty()) throw FormatError("truncated PPM header");
    return token;
  };
  if (next_token() != "P6") throw FormatError("not a binary PPM (P6) image");
  Index w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(next_token());
    h = std::stoll(next_token());
    maxval = std::stoll(next_token());
  } catch (const std::logic_error&) {
    throw FormatError("malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw FormatError("unsupported PPM geometry or maxval");
  ++pos;  // single whitespace byte after maxval
  if (bytes.size() < pos + static_cast<std::size_t>(3 * w * h)) throw FormatError("truncated PPM payload");
  Tensor<float> image({3, h, w});
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (Index c = 0; c < 3; ++c) image[c * h * w + y * w + x] = bytes[pos++] / 255.0f;
    }
  }
  return image;
}

void write_ppm(const Tensor<float>& image, const std::filesystem::path& path) {
  const auto bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor<float> read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_ppm(bytes);
}

Tensor<float> tile_images(const Tensor<float>& images, Index columns, Index pad) {
  if (images.rank() != 4) throw DimensionError("tile_images expects [N,C,H,W]");
  const Index n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  columns = std::max<Index>(1, std::min(columns, n));
  const Index rows = (n + columns - 1) / columns;
  const Index th = rows * h + (rows - 1) * pad;
  const Index tw = columns * w + (columns - 1) * pad;
  Tensor<float> out({c, th, tw}, 1.0f);
  for (Index i = 0; i < n; ++i) {
    const Index oy = (i / columns) * (h + pad);
    const Index ox = (i % columns) * (w + pad);
    for (Index ch = 0; ch < c; ++ch) {
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          out[ch * th * tw + (oy + y) * tw + ox + x] = images[((i * c + ch) * h + y) * w + x];
        }
      }
    }
  }
  return out;
}

}  // namespace rl

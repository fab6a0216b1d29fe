#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "robustlens/tensor.h"

namespace rl {

// Binary PPM (P6, maxval 255). Images are channel-planar [3,H,W] in [0,1];
// single-channel images are written as grey. Values outside [0,1] are
// clipped and reported through the log.
std::vector<std::uint8_t> encode_ppm(const Tensor<float>& image);
Tensor<float> decode_ppm(std::span<const std::uint8_t> bytes);

void write_ppm(const Tensor<float>& image, const std::filesystem::path& path);
Tensor<float> read_ppm(const std::filesystem::path& path);

// Lays out [N,3,H,W] images in a grid with `pad` pixels of white between them.
Tensor<float> tile_images(const Tensor<float>& images, Index columns, Index pad = 1);

}  // namespace rl

#pragma once

#include <cstdint>
#include <filesystem>

#include "fewshot/tensor.hpp"

// Binary Netpbm files: P6 for RGB images, P5 for single-channel maps. Both are
// lossless at 8 bits per sample, which is the storage precision of every
// image in the datasets.
namespace fewshot::io {

using Bytes = Tensor<std::uint8_t>;

void write_ppm(const std::filesystem::path& path, const Bytes& rgb);
void write_pgm(const std::filesystem::path& path, const Bytes& gray);

/// Reads P5 or P6; the channel count follows the magic number.
Bytes read_netpbm(const std::filesystem::path& path);

/// [0,1] floats to bytes, rounding to nearest.
Bytes to_bytes(const Tensor<float>& x);
Tensor<float> from_bytes(const Bytes& x);

}  // namespace fewshot::io

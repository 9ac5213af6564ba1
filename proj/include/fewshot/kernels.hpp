#pragma once

// Numerical kernels behind every layer. Two implementations live side by side:
//
//   fewshot::kernels             im2col + GEMM convolutions and OpenMP loops;
//                                what the networks call.
//   fewshot::kernels::reference  direct nested loops, serial, double
//                                accumulation. Kept for the kernel tests and
//                                the benchmark; never used on the hot path.
//
// Both take identical arguments and must agree to rounding.

#include <span>

#include "fewshot/tensor.hpp"

namespace fewshot::kernels {

struct ConvShape {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  int dilation = 1;

  int out_extent(int in) const { return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1; }
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
  }
};

/// y = conv(x, weight) + bias. weight is [out][in][k][k]; bias may be empty.
/// y is resized as needed.
template <typename T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias,
                    const ConvShape& shape, Tensor<T>& y);

/// Accumulates dL/dweight and dL/dbias into gweight/gbias (either may be
/// empty to skip) and, when gx is non-null, overwrites *gx with dL/dx.
template <typename T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight, const Tensor<T>& gy,
                     const ConvShape& shape, Tensor<T>* gx, std::span<T> gweight,
                     std::span<T> gbias);

/// Bilinear resampling with half-pixel centres (align_corners = false).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int height, int width);

/// Adjoint of resize_bilinear: scatters gy back onto an (in_h, in_w) grid.
template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& gy, int in_height, int in_width);

/// Nearest-neighbour resampling sampling at cell centres:
/// src = min(floor((dst + 0.5) * in / out), in - 1).
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, int height, int width);

/// Non-overlapping average pooling by an integer factor per axis.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int factor_h, int factor_w);

template <typename T>
Tensor<T> avg_pool_backward(const Tensor<T>& gy, int factor_h, int factor_w);

int nearest_source(int dst, int in_extent, int out_extent);

}  // namespace fewshot::kernels

namespace fewshot::kernels::reference {

template <typename T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias,
                    const ConvShape& shape, Tensor<T>& y);

template <typename T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight, const Tensor<T>& gy,
                     const ConvShape& shape, Tensor<T>* gx, std::span<T> gweight,
                     std::span<T> gbias);

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int height, int width);

template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& gy, int in_height, int in_width);

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int factor_h, int factor_w);

}  // namespace fewshot::kernels::reference

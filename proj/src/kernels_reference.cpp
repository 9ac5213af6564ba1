#include <algorithm>
#include <cmath>

#include "fewshot/errors.hpp"
#include "fewshot/kernels.hpp"

namespace fewshot::kernels::reference {

template <typename T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias,
                    const ConvShape& s, Tensor<T>& y) {
  if (x.channels() != s.in_channels || weight.size() != s.weight_count())
    throw ArgumentError("reference conv2d: shape mismatch");
  const int oh = s.out_extent(x.height());
  const int ow = s.out_extent(x.width());
  y = Tensor<T>(s.out_channels, oh, ow);
  for (int o = 0; o < s.out_channels; ++o)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = bias.empty() ? 0.0 : static_cast<double>(bias[o]);
        for (int c = 0; c < s.in_channels; ++c)
          for (int ky = 0; ky < s.kernel; ++ky)
            for (int kx = 0; kx < s.kernel; ++kx) {
              const int iy = oy * s.stride - s.padding + ky * s.dilation;
              const int ix = ox * s.stride - s.padding + kx * s.dilation;
              if (iy < 0 || iy >= x.height() || ix < 0 || ix >= x.width()) continue;
              const auto w = weight[((static_cast<std::size_t>(o) * s.in_channels + c) * s.kernel + ky) *
                                        s.kernel + kx];
              acc += static_cast<double>(w) * static_cast<double>(x.at(c, iy, ix));
            }
        y.at(o, oy, ox) = static_cast<T>(acc);
      }
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight, const Tensor<T>& gy,
                     const ConvShape& s, Tensor<T>* gx, std::span<T> gweight,
                     std::span<T> gbias) {
  const int oh = s.out_extent(x.height());
  const int ow = s.out_extent(x.width());
  if (gy.channels() != s.out_channels || gy.height() != oh || gy.width() != ow)
    throw ArgumentError("reference conv2d_backward: shape mismatch");
  if (gx != nullptr) *gx = Tensor<T>(x.channels(), x.height(), x.width());
  for (int o = 0; o < s.out_channels; ++o) {
    if (!gbias.empty()) {
      double acc = 0.0;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) acc += gy.at(o, oy, ox);
      gbias[o] += static_cast<T>(acc);
    }
    for (int c = 0; c < s.in_channels; ++c)
      for (int ky = 0; ky < s.kernel; ++ky)
        for (int kx = 0; kx < s.kernel; ++kx) {
          const std::size_t wi =
              ((static_cast<std::size_t>(o) * s.in_channels + c) * s.kernel + ky) * s.kernel + kx;
          double acc = 0.0;
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              const int iy = oy * s.stride - s.padding + ky * s.dilation;
              const int ix = ox * s.stride - s.padding + kx * s.dilation;
              if (iy < 0 || iy >= x.height() || ix < 0 || ix >= x.width()) continue;
              acc += static_cast<double>(gy.at(o, oy, ox)) * x.at(c, iy, ix);
              if (gx != nullptr) gx->at(c, iy, ix) += gy.at(o, oy, ox) * weight[wi];
            }
          if (!gweight.empty()) gweight[wi] += static_cast<T>(acc);
        }
  }
}

namespace {
struct Tap {
  int lo;
  int hi;
  double frac;
};

Tap bilinear_tap(int dst, int in_extent, int out_extent) {
  const double src = std::max((dst + 0.5) * in_extent / out_extent - 0.5, 0.0);
  const int lo = std::min(static_cast<int>(std::floor(src)), in_extent - 1);
  return {lo, std::min(lo + 1, in_extent - 1), src - lo};
}
}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int height, int width) {
  Tensor<T> y(x.channels(), height, width);
  for (int c = 0; c < x.channels(); ++c)
    for (int oy = 0; oy < height; ++oy)
      for (int ox = 0; ox < width; ++ox) {
        const Tap ty = bilinear_tap(oy, x.height(), height);
        const Tap tx = bilinear_tap(ox, x.width(), width);
        const double v = (1 - ty.frac) * ((1 - tx.frac) * x.at(c, ty.lo, tx.lo) + tx.frac * x.at(c, ty.lo, tx.hi)) +
                         ty.frac * ((1 - tx.frac) * x.at(c, ty.hi, tx.lo) + tx.frac * x.at(c, ty.hi, tx.hi));
        y.at(c, oy, ox) = static_cast<T>(v);
      }
  return y;
}

template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& gy, int in_height, int in_width) {
  Tensor<T> gx(gy.channels(), in_height, in_width);
  for (int c = 0; c < gy.channels(); ++c)
    for (int oy = 0; oy < gy.height(); ++oy)
      for (int ox = 0; ox < gy.width(); ++ox) {
        const Tap ty = bilinear_tap(oy, in_height, gy.height());
        const Tap tx = bilinear_tap(ox, in_width, gy.width());
        const double g = gy.at(c, oy, ox);
        gx.at(c, ty.lo, tx.lo) += static_cast<T>(g * (1 - ty.frac) * (1 - tx.frac));
        gx.at(c, ty.lo, tx.hi) += static_cast<T>(g * (1 - ty.frac) * tx.frac);
        gx.at(c, ty.hi, tx.lo) += static_cast<T>(g * ty.frac * (1 - tx.frac));
        gx.at(c, ty.hi, tx.hi) += static_cast<T>(g * ty.frac * tx.frac);
      }
  return gx;
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int fh, int fw) {
  Tensor<T> y(x.channels(), x.height() / fh, x.width() / fw);
  for (int c = 0; c < y.channels(); ++c)
    for (int oy = 0; oy < y.height(); ++oy)
      for (int ox = 0; ox < y.width(); ++ox) {
        double acc = 0.0;
        for (int dy = 0; dy < fh; ++dy)
          for (int dx = 0; dx < fw; ++dx) acc += x.at(c, oy * fh + dy, ox * fw + dx);
        y.at(c, oy, ox) = static_cast<T>(acc / (fh * fw));
      }
  return y;
}

#define FEWSHOT_INSTANTIATE(T)                                                                    \
  template void conv2d_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>,      \
                                  const ConvShape&, Tensor<T>&);                                  \
  template void conv2d_backward<T>(const Tensor<T>&, std::span<const T>, const Tensor<T>&,       \
                                   const ConvShape&, Tensor<T>*, std::span<T>, std::span<T>);     \
  template Tensor<T> resize_bilinear<T>(const Tensor<T>&, int, int);                              \
  template Tensor<T> resize_bilinear_backward<T>(const Tensor<T>&, int, int);                     \
  template Tensor<T> avg_pool<T>(const Tensor<T>&, int, int);

FEWSHOT_INSTANTIATE(float)
FEWSHOT_INSTANTIATE(double)
#undef FEWSHOT_INSTANTIATE

}  // namespace fewshot::kernels::reference

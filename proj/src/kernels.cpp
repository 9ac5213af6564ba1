#include "fewshot/kernels.hpp"

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "fewshot/errors.hpp"

namespace fewshot::kernels {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
std::vector<T>& scratch() {
  thread_local std::vector<T> buffer;
  return buffer;
}

bool is_pointwise(const ConvShape& s) {
  return s.kernel == 1 && s.stride == 1 && s.padding == 0;
}

template <typename T>
void im2col(const Tensor<T>& x, const ConvShape& s, int out_h, int out_w, T* col) {
  const int kk = s.kernel * s.kernel;
  const int rows = s.in_channels * kk;
  const std::size_t cols = static_cast<std::size_t>(out_h) * out_w;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int c = r / kk;
    const int ky = (r % kk) / s.kernel;
    const int kx = r % s.kernel;
    const T* src = x.channel(c);
    T* dst = col + r * cols;
    for (int oy = 0; oy < out_h; ++oy) {
      const int iy = oy * s.stride - s.padding + ky * s.dilation;
      T* row = dst + static_cast<std::size_t>(oy) * out_w;
      if (iy < 0 || iy >= x.height()) {
        std::fill(row, row + out_w, T(0));
        continue;
      }
      const T* line = src + static_cast<std::size_t>(iy) * x.width();
      for (int ox = 0; ox < out_w; ++ox) {
        const int ix = ox * s.stride - s.padding + kx * s.dilation;
        row[ox] = (ix >= 0 && ix < x.width()) ? line[ix] : T(0);
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvShape& s, int out_h, int out_w, Tensor<T>& gx) {
  const int kk = s.kernel * s.kernel;
  const std::size_t cols = static_cast<std::size_t>(out_h) * out_w;
  gx.fill(T(0));
#pragma omp parallel for schedule(static)
  for (int c = 0; c < s.in_channels; ++c) {
    T* dst = gx.channel(c);
    for (int k = 0; k < kk; ++k) {
      const int ky = k / s.kernel;
      const int kx = k % s.kernel;
      const T* src = col + (static_cast<std::size_t>(c) * kk + k) * cols;
      for (int oy = 0; oy < out_h; ++oy) {
        const int iy = oy * s.stride - s.padding + ky * s.dilation;
        if (iy < 0 || iy >= gx.height()) continue;
        T* line = dst + static_cast<std::size_t>(iy) * gx.width();
        const T* row = src + static_cast<std::size_t>(oy) * out_w;
        for (int ox = 0; ox < out_w; ++ox) {
          const int ix = ox * s.stride - s.padding + kx * s.dilation;
          if (ix >= 0 && ix < gx.width()) line[ix] += row[ox];
        }
      }
    }
  }
}

template <typename T>
void check_conv_args(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias,
                     const ConvShape& s) {
  if (x.channels() != s.in_channels)
    throw ArgumentError("conv2d: input has " + std::to_string(x.channels()) +
                        " channels, layer expects " + std::to_string(s.in_channels));
  if (weight.size() != s.weight_count()) throw ArgumentError("conv2d: weight size mismatch");
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(s.out_channels))
    throw ArgumentError("conv2d: bias size mismatch");
  if (s.out_extent(x.height()) <= 0 || s.out_extent(x.width()) <= 0)
    throw ArgumentError("conv2d: input " + shape_of(x) + " too small for kernel");
}

}  // namespace

int nearest_source(int dst, int in_extent, int out_extent) {
  const double src = (dst + 0.5) * static_cast<double>(in_extent) / out_extent;
  return std::min(static_cast<int>(std::floor(src)), in_extent - 1);
}

template <typename T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias,
                    const ConvShape& s, Tensor<T>& y) {
  check_conv_args(x, weight, bias, s);
  const int out_h = s.out_extent(x.height());
  const int out_w = s.out_extent(x.width());
  if (y.channels() != s.out_channels || y.height() != out_h || y.width() != out_w)
    y = Tensor<T>(s.out_channels, out_h, out_w);
  const Eigen::Index cols = static_cast<Eigen::Index>(out_h) * out_w;
  const Eigen::Index depth = static_cast<Eigen::Index>(s.in_channels) * s.kernel * s.kernel;

  const T* col = x.data();
  if (!is_pointwise(s)) {
    auto& buf = scratch<T>();
    buf.resize(static_cast<std::size_t>(depth) * cols);
    im2col(x, s, out_h, out_w, buf.data());
    col = buf.data();
  }
  ConstMatMap<T> w(weight.data(), s.out_channels, depth);
  ConstMatMap<T> c(col, depth, cols);
  MatMap<T> out(y.data(), s.out_channels, cols);
  out.noalias() = w * c;
  if (!bias.empty()) {
    for (int o = 0; o < s.out_channels; ++o) out.row(o).array() += bias[o];
  }
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight, const Tensor<T>& gy,
                     const ConvShape& s, Tensor<T>* gx, std::span<T> gweight,
                     std::span<T> gbias) {
  check_conv_args(x, weight, std::span<const T>(), s);
  const int out_h = s.out_extent(x.height());
  const int out_w = s.out_extent(x.width());
  if (gy.channels() != s.out_channels || gy.height() != out_h || gy.width() != out_w)
    throw ArgumentError("conv2d_backward: gradient shape " + shape_of(gy) + " does not match output");
  const Eigen::Index cols = static_cast<Eigen::Index>(out_h) * out_w;
  const Eigen::Index depth = static_cast<Eigen::Index>(s.in_channels) * s.kernel * s.kernel;
  ConstMatMap<T> g(gy.data(), s.out_channels, cols);

  if (!gbias.empty()) {
    for (int o = 0; o < s.out_channels; ++o) gbias[o] += g.row(o).sum();
  }

  const bool pointwise = is_pointwise(s);
  if (!gweight.empty()) {
    const T* col = x.data();
    if (!pointwise) {
      auto& buf = scratch<T>();
      buf.resize(static_cast<std::size_t>(depth) * cols);
      im2col(x, s, out_h, out_w, buf.data());
      col = buf.data();
    }
    MatMap<T> gw(gweight.data(), s.out_channels, depth);
    gw.noalias() += g * ConstMatMap<T>(col, depth, cols).transpose();
  }

  if (gx != nullptr) {
    ConstMatMap<T> w(weight.data(), s.out_channels, depth);
    if (!gx->same_shape(x)) *gx = Tensor<T>(x.channels(), x.height(), x.width());
    if (pointwise) {
      MatMap<T>(gx->data(), depth, cols).noalias() = w.transpose() * g;
    } else {
      auto& buf = scratch<T>();
      buf.resize(static_cast<std::size_t>(depth) * cols);
      MatMap<T>(buf.data(), depth, cols).noalias() = w.transpose() * g;
      col2im(buf.data(), s, out_h, out_w, *gx);
    }
  }
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int height, int width) {
  if (height <= 0 || width <= 0) throw ArgumentError("resize_bilinear: empty target grid");
  if (x.height() == height && x.width() == width) return x;
  Tensor<T> y(x.channels(), height, width);
  const double sy = static_cast<double>(x.height()) / height;
  const double sx = static_cast<double>(x.width()) / width;
  std::vector<int> x0(width), x1(width);
  std::vector<T> lx(width);
  for (int ox = 0; ox < width; ++ox) {
    const double src = std::max((ox + 0.5) * sx - 0.5, 0.0);
    x0[ox] = std::min(static_cast<int>(src), x.width() - 1);
    x1[ox] = std::min(x0[ox] + 1, x.width() - 1);
    lx[ox] = static_cast<T>(src - x0[ox]);
  }
#pragma omp parallel for schedule(static)
  for (int c = 0; c < x.channels(); ++c) {
    for (int oy = 0; oy < height; ++oy) {
      const double src = std::max((oy + 0.5) * sy - 0.5, 0.0);
      const int y0 = std::min(static_cast<int>(src), x.height() - 1);
      const int y1 = std::min(y0 + 1, x.height() - 1);
      const T ly = static_cast<T>(src - y0);
      for (int ox = 0; ox < width; ++ox) {
        const T top = x.at(c, y0, x0[ox]) * (T(1) - lx[ox]) + x.at(c, y0, x1[ox]) * lx[ox];
        const T bot = x.at(c, y1, x0[ox]) * (T(1) - lx[ox]) + x.at(c, y1, x1[ox]) * lx[ox];
        y.at(c, oy, ox) = top * (T(1) - ly) + bot * ly;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& gy, int in_height, int in_width) {
  if (gy.height() == in_height && gy.width() == in_width) return gy;
  Tensor<T> gx(gy.channels(), in_height, in_width);
  const double sy = static_cast<double>(in_height) / gy.height();
  const double sx = static_cast<double>(in_width) / gy.width();
#pragma omp parallel for schedule(static)
  for (int c = 0; c < gy.channels(); ++c) {
    for (int oy = 0; oy < gy.height(); ++oy) {
      const double srcy = std::max((oy + 0.5) * sy - 0.5, 0.0);
      const int y0 = std::min(static_cast<int>(srcy), in_height - 1);
      const int y1 = std::min(y0 + 1, in_height - 1);
      const T ly = static_cast<T>(srcy - y0);
      for (int ox = 0; ox < gy.width(); ++ox) {
        const double srcx = std::max((ox + 0.5) * sx - 0.5, 0.0);
        const int x0 = std::min(static_cast<int>(srcx), in_width - 1);
        const int x1 = std::min(x0 + 1, in_width - 1);
        const T lx = static_cast<T>(srcx - x0);
        const T g = gy.at(c, oy, ox);
        gx.at(c, y0, x0) += g * (T(1) - ly) * (T(1) - lx);
        gx.at(c, y0, x1) += g * (T(1) - ly) * lx;
        gx.at(c, y1, x0) += g * ly * (T(1) - lx);
        gx.at(c, y1, x1) += g * ly * lx;
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, int height, int width) {
  if (height <= 0 || width <= 0) throw ArgumentError("resize_nearest: empty target grid");
  if (x.height() == height && x.width() == width) return x;
  Tensor<T> y(x.channels(), height, width);
  for (int c = 0; c < x.channels(); ++c)
    for (int oy = 0; oy < height; ++oy) {
      const int iy = nearest_source(oy, x.height(), height);
      for (int ox = 0; ox < width; ++ox)
        y.at(c, oy, ox) = x.at(c, iy, nearest_source(ox, x.width(), width));
    }
  return y;
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int fh, int fw) {
  if (fh <= 0 || fw <= 0 || x.height() % fh != 0 || x.width() % fw != 0)
    throw ArgumentError("avg_pool: factor does not divide " + shape_of(x));
  Tensor<T> y(x.channels(), x.height() / fh, x.width() / fw);
  const T inv = T(1) / static_cast<T>(fh * fw);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < x.channels(); ++c)
    for (int iy = 0; iy < x.height(); ++iy)
      for (int ix = 0; ix < x.width(); ++ix) y.at(c, iy / fh, ix / fw) += x.at(c, iy, ix) * inv;
  return y;
}

template <typename T>
Tensor<T> avg_pool_backward(const Tensor<T>& gy, int fh, int fw) {
  Tensor<T> gx(gy.channels(), gy.height() * fh, gy.width() * fw);
  const T inv = T(1) / static_cast<T>(fh * fw);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < gx.channels(); ++c)
    for (int iy = 0; iy < gx.height(); ++iy)
      for (int ix = 0; ix < gx.width(); ++ix) gx.at(c, iy, ix) = gy.at(c, iy / fh, ix / fw) * inv;
  return gx;
}

#define FEWSHOT_INSTANTIATE(T)                                                                    \
  template void conv2d_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>,      \
                                  const ConvShape&, Tensor<T>&);                                  \
  template void conv2d_backward<T>(const Tensor<T>&, std::span<const T>, const Tensor<T>&,       \
                                   const ConvShape&, Tensor<T>*, std::span<T>, std::span<T>);     \
  template Tensor<T> resize_bilinear<T>(const Tensor<T>&, int, int);                              \
  template Tensor<T> resize_bilinear_backward<T>(const Tensor<T>&, int, int);                     \
  template Tensor<T> resize_nearest<T>(const Tensor<T>&, int, int);                               \
  template Tensor<T> avg_pool<T>(const Tensor<T>&, int, int);                                     \
  template Tensor<T> avg_pool_backward<T>(const Tensor<T>&, int, int);

FEWSHOT_INSTANTIATE(float)
FEWSHOT_INSTANTIATE(double)
#undef FEWSHOT_INSTANTIATE

template Tensor<unsigned char> resize_nearest<unsigned char>(const Tensor<unsigned char>&, int, int);
template Tensor<int> resize_nearest<int>(const Tensor<int>&, int, int);

}  // namespace fewshot::kernels

#include <doctest.h>

#include <cmath>

#include "fewshot/kernels.hpp"
#include "fewshot/nn.hpp"
#include "support.hpp"

using namespace fewshot;
using fewshot::testing::random_tensor;
using kernels::ConvShape;

namespace {

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.same_shape(b));
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    d = std::max(d, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return d;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data()[i]) * b.data()[i];
  return s;
}

const ConvShape kShapes[] = {
    {3, 5, 3, 1, 1, 1}, {4, 6, 3, 2, 1, 1}, {5, 4, 1, 1, 0, 1}, {4, 4, 3, 1, 2, 2},
    {6, 3, 3, 1, 4, 4}, {2, 7, 3, 1, 8, 8}, {3, 2, 3, 2, 0, 1}, {8, 8, 3, 1, 1, 1},
};

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("convolution forward matches the direct loop for strides, padding and dilation") {
    Rng rng(1);
    for (const auto& s : kShapes) {
      CAPTURE(s.kernel);
      CAPTURE(s.stride);
      CAPTURE(s.dilation);
      const auto x = random_tensor<double>(s.in_channels, 13, 11, rng);
      std::vector<double> w(s.weight_count()), b(s.out_channels);
      for (auto& v : w) v = uniform(rng, -1, 1);
      for (auto& v : b) v = uniform(rng, -1, 1);
      Tensor<double> fast, slow;
      kernels::conv2d_forward<double>(x, w, b, s, fast);
      kernels::reference::conv2d_forward<double>(x, w, b, s, slow);
      CHECK(max_abs_diff(fast, slow) < 1e-12);
    }
  }

  TEST_CASE("convolution backward matches the direct loop") {
    Rng rng(2);
    for (const auto& s : kShapes) {
      const auto x = random_tensor<double>(s.in_channels, 12, 10, rng);
      std::vector<double> w(s.weight_count());
      for (auto& v : w) v = uniform(rng, -1, 1);
      const auto gy = random_tensor<double>(s.out_channels, s.out_extent(12), s.out_extent(10), rng);
      Tensor<double> gx_fast, gx_slow;
      std::vector<double> gw_fast(w.size(), 0.5), gw_slow(w.size(), 0.5);
      std::vector<double> gb_fast(s.out_channels, 0.25), gb_slow(s.out_channels, 0.25);
      kernels::conv2d_backward<double>(x, w, gy, s, &gx_fast, gw_fast, gb_fast);
      kernels::reference::conv2d_backward<double>(x, w, gy, s, &gx_slow, gw_slow, gb_slow);
      CHECK(max_abs_diff(gx_fast, gx_slow) < 1e-11);
      CHECK(max_abs_diff(gw_fast, gw_slow) < 1e-11);
      CHECK(max_abs_diff(gb_fast, gb_slow) < 1e-11);
    }
  }

  TEST_CASE("float kernels agree with the double reference to rounding") {
    Rng rng(3);
    const ConvShape s{16, 24, 3, 1, 2, 2};
    const auto x = random_tensor<float>(16, 16, 16, rng);
    std::vector<float> w(s.weight_count()), b(24, 0.1f);
    for (auto& v : w) v = static_cast<float>(uniform(rng, -0.2, 0.2));
    Tensor<float> fast, slow;
    kernels::conv2d_forward<float>(x, w, b, s, fast);
    kernels::reference::conv2d_forward<float>(x, w, b, s, slow);
    CHECK(max_abs_diff(fast, slow) < 1e-4);
  }

  TEST_CASE("convolution backward is the adjoint of forward") {
    Rng rng(4);
    const ConvShape s{3, 4, 3, 2, 1, 1};
    const auto x = random_tensor<double>(3, 9, 9, rng);
    std::vector<double> w(s.weight_count());
    for (auto& v : w) v = uniform(rng, -1, 1);
    Tensor<double> y;
    kernels::conv2d_forward<double>(x, w, {}, s, y);
    const auto gy = random_tensor<double>(4, y.height(), y.width(), rng);
    Tensor<double> gx;
    kernels::conv2d_backward<double>(x, w, gy, s, &gx, {}, {});
    // <conv(x), gy> = <x, conv^T(gy)> for a bias-free convolution.
    CHECK(dot(y, gy) == doctest::Approx(dot(x, gx)).epsilon(1e-12));
  }

  TEST_CASE("bilinear resize matches the reference and its adjoint") {
    Rng rng(5);
    for (auto [h, w, oh, ow] : {std::array{16, 16, 64, 64}, {64, 64, 16, 16}, {5, 7, 11, 3}, {8, 8, 8, 8}}) {
      const auto x = random_tensor<double>(3, h, w, rng);
      const auto fast = kernels::resize_bilinear(x, oh, ow);
      CHECK(max_abs_diff(fast, kernels::reference::resize_bilinear(x, oh, ow)) < 1e-12);
      const auto gy = random_tensor<double>(3, oh, ow, rng);
      const auto gx = kernels::resize_bilinear_backward(gy, h, w);
      CHECK(max_abs_diff(gx, kernels::reference::resize_bilinear_backward(gy, h, w)) < 1e-12);
      CHECK(dot(fast, gy) == doctest::Approx(dot(x, gx)).epsilon(1e-12));
    }
  }

  TEST_CASE("bilinear resize uses half-pixel centres") {
    // 2 -> 4 with align_corners=false: outputs sample at -0.25, 0.25, 0.75, 1.25.
    Tensor<double> x(1, 1, 2);
    x.at(0, 0, 0) = 0.0;
    x.at(0, 0, 1) = 1.0;
    const auto y = kernels::resize_bilinear(x, 1, 4);
    CHECK(y.at(0, 0, 0) == doctest::Approx(0.0));
    CHECK(y.at(0, 0, 1) == doctest::Approx(0.25));
    CHECK(y.at(0, 0, 2) == doctest::Approx(0.75));
    CHECK(y.at(0, 0, 3) == doctest::Approx(1.0));
  }

  TEST_CASE("nearest resize samples cell centres") {
    CHECK(kernels::nearest_source(0, 64, 16) == 2);
    CHECK(kernels::nearest_source(15, 64, 16) == 62);
    CHECK(kernels::nearest_source(0, 16, 64) == 0);
    CHECK(kernels::nearest_source(63, 16, 64) == 15);
    Tensor<int> x(1, 4, 4);
    for (int i = 0; i < 16; ++i) x.data()[i] = i;
    const auto y = kernels::resize_nearest(x, 2, 2);
    CHECK(y.at(0, 0, 0) == 5);
    CHECK(y.at(0, 1, 1) == 15);
  }

  TEST_CASE("average pooling matches the reference and its adjoint") {
    Rng rng(6);
    const auto x = random_tensor<double>(4, 16, 16, rng);
    for (int f : {1, 2, 4, 16}) {
      const auto y = kernels::avg_pool(x, f, f);
      CHECK(max_abs_diff(y, kernels::reference::avg_pool(x, f, f)) < 1e-12);
      const auto gy = random_tensor<double>(4, y.height(), y.width(), rng);
      CHECK(dot(y, gy) == doctest::Approx(dot(x, kernels::avg_pool_backward(gy, f, f))).epsilon(1e-12));
    }
  }

  TEST_CASE("channel concat and split are inverse") {
    Rng rng(7);
    const auto a = random_tensor<double>(2, 3, 3, rng), b = random_tensor<double>(5, 3, 3, rng);
    const auto cat = nn::concat_channels<double>({&a, &b});
    CHECK(cat.channels() == 7);
    const auto parts = nn::split_channels(cat, {2, 5});
    CHECK(parts[0] == a);
    CHECK(parts[1] == b);
  }

  TEST_CASE("SGD with learning rate zero leaves parameters bit-identical") {
    Rng rng(8);
    nn::Conv2d<float> conv("c", ConvShape{3, 4, 3, 1, 1});
    conv.init(rng);
    nn::ParamRefs<float> params;
    conv.collect(params);
    const auto before = nn::digest(params);
    const auto x = random_tensor<float>(3, 6, 6, rng);
    conv.backward(x, random_tensor<float>(4, 6, 6, rng));
    nn::Sgd<float>({0.0, 0.9, 1e-4}).step(params);
    CHECK(nn::digest(params) == before);
  }

  TEST_CASE("polynomial learning-rate decay") {
    CHECK(nn::poly_lr_scale(0, 100) == 1.0);
    CHECK(nn::poly_lr_scale(50, 100) == doctest::Approx(std::pow(0.5, 0.9)));
    CHECK(nn::poly_lr_scale(100, 100) == 0.0);
    CHECK(nn::poly_lr_scale(99, 100) > 0.0);
  }

  TEST_CASE("softmax cross-entropy skips ignored cells") {
    Tensor<double> scores(3, 1, 2);
    scores.at(0, 0, 0) = 5.0;
    scores.at(2, 0, 1) = 1.0;
    Tensor<double> g;
    const double loss = nn::softmax_cross_entropy(scores, {nn::kIgnoreTarget, 1}, &g);
    const double z = 1.0 + 1.0 + std::exp(1.0);
    CHECK(loss == doctest::Approx(std::log(z)));
    CHECK(g.at(0, 0, 0) == 0.0);
    CHECK(g.at(1, 0, 1) == doctest::Approx(1.0 / z - 1.0));
    CHECK(nn::softmax_cross_entropy(scores, {nn::kIgnoreTarget, nn::kIgnoreTarget}, &g) == 0.0);
    CHECK_THROWS_AS(nn::softmax_cross_entropy(scores, {0, 3}, &g), ArgumentError);
  }
}

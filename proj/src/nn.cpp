#include "fewshot/nn.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "fewshot/errors.hpp"

namespace fewshot {

std::string shape_string(int c, int h, int w) {
  return "(" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w) + ")";
}

}  // namespace fewshot

namespace fewshot::nn {

template <typename T>
Param<T>::Param(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
  std::size_t total = 1;
  for (int d : shape) total *= static_cast<std::size_t>(d);
  value.assign(total, T(0));
  grad.assign(total, T(0));
  velocity.assign(total, T(0));
}

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, kernels::ConvShape shape, bool with_bias)
    : shape_(shape),
      weight_(name + ".weight", {shape.out_channels, shape.in_channels, shape.kernel, shape.kernel}) {
  if (with_bias) bias_ = Param<T>(name + ".bias", {shape.out_channels});
}

template <typename T>
void Conv2d<T>::init(Rng& rng) {
  const double fan_in = static_cast<double>(shape_.in_channels) * shape_.kernel * shape_.kernel;
  const double stddev = std::sqrt(2.0 / fan_in);
  for (auto& w : weight_.value) w = static_cast<T>(normal(rng) * stddev);
  std::fill(bias_.value.begin(), bias_.value.end(), T(0));
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  Tensor<T> y;
  kernels::conv2d_forward<T>(x, weight_.value, bias_.value, shape_, y);
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& x, const Tensor<T>& gy, bool need_input_grad) {
  Tensor<T> gx;
  kernels::conv2d_backward<T>(x, weight_.value, gy, shape_, need_input_grad ? &gx : nullptr,
                              weight_.grad, bias_.grad);
  return gx;
}

template <typename T>
void Conv2d<T>::collect(ParamRefs<T>& out) {
  out.push_back(&weight_);
  if (has_bias()) out.push_back(&bias_);
}

template <typename T>
Tensor<T> relu(Tensor<T> x) {
  for (auto& v : x.values()) v = v > T(0) ? v : T(0);
  return x;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, Tensor<T> gy) {
  if (!y.same_shape(gy)) throw ArgumentError("relu_backward: shape mismatch");
  const T* out = y.data();
  T* g = gy.data();
  for (std::size_t i = 0; i < gy.size(); ++i)
    if (!(out[i] > T(0))) g[i] = T(0);
  return gy;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
  return y;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw ArgumentError("concat_channels: nothing to concatenate");
  const int h = parts.front()->height();
  const int w = parts.front()->width();
  int channels = 0;
  for (const auto* p : parts) {
    if (p->height() != h || p->width() != w)
      throw ArgumentError("concat_channels: grid mismatch " + shape_of(*p) + " vs " +
                          shape_string(parts.front()->channels(), h, w));
    channels += p->channels();
  }
  Tensor<T> out(channels, h, w);
  T* dst = out.data();
  for (const auto* p : parts) dst = std::copy(p->data(), p->data() + p->size(), dst);
  return out;
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& gy, const std::vector<int>& channels) {
  std::vector<Tensor<T>> out;
  const T* src = gy.data();
  for (int c : channels) {
    Tensor<T> part(c, gy.height(), gy.width());
    std::copy(src, src + part.size(), part.data());
    src += part.size();
    out.push_back(std::move(part));
  }
  if (src != gy.data() + gy.size()) throw ArgumentError("split_channels: channel counts do not sum");
  return out;
}

template <typename T>
Tensor<T> mirror_horizontal(const Tensor<T>& x) {
  Tensor<T> y(x.channels(), x.height(), x.width());
  for (int c = 0; c < x.channels(); ++c)
    for (int r = 0; r < x.height(); ++r)
      for (int col = 0; col < x.width(); ++col) y.at(c, r, col) = x.at(c, r, x.width() - 1 - col);
  return y;
}

template <typename T>
void zero_grad(const ParamRefs<T>& params) {
  for (auto* p : params) std::fill(p->grad.begin(), p->grad.end(), T(0));
}

template <typename T>
std::size_t count_parameters(const ParamRefs<T>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->size();
  return n;
}

template <typename T>
std::uint64_t digest(const ParamRefs<T>& params) {
  std::uint64_t h = fnv1a64("params");
  for (const auto* p : params) {
    h = fnv1a64(p->name, h);
    for (int d : p->shape) h = fnv1a64(std::to_string(d) + ",", h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(p->value.data()),
                                 p->value.size() * sizeof(T)),
                h);
  }
  return h;
}

double poly_lr_scale(std::size_t step, std::size_t total, double power) {
  if (total == 0 || step >= total) return 0.0;
  return std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

template <typename T>
void Sgd<T>::step(const ParamRefs<T>& params, double grad_scale, double lr_scale) const {
  const double lr = cfg_.learning_rate * lr_scale;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double g = static_cast<double>(p->grad[i]) * grad_scale +
                       cfg_.weight_decay * static_cast<double>(p->value[i]);
      const double v = cfg_.momentum * static_cast<double>(p->velocity[i]) + g;
      p->velocity[i] = static_cast<T>(v);
      if (lr != 0.0) p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - lr * v);
    }
    std::fill(p->grad.begin(), p->grad.end(), T(0));
  }
}

#define FEWSHOT_INSTANTIATE(T)                                                            \
  template struct Param<T>;                                                               \
  template class Conv2d<T>;                                                               \
  template class Sgd<T>;                                                                  \
  template Tensor<T> relu<T>(Tensor<T>);                                                  \
  template Tensor<T> relu_backward<T>(const Tensor<T>&, Tensor<T>);                       \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                        \
  template Tensor<T> concat_channels<T>(const std::vector<const Tensor<T>*>&);            \
  template std::vector<Tensor<T>> split_channels<T>(const Tensor<T>&, const std::vector<int>&); \
  template Tensor<T> mirror_horizontal<T>(const Tensor<T>&);                              \
  template void zero_grad<T>(const ParamRefs<T>&);                                        \
  template std::size_t count_parameters<T>(const ParamRefs<T>&);                          \
  template std::uint64_t digest<T>(const ParamRefs<T>&);

FEWSHOT_INSTANTIATE(float)
FEWSHOT_INSTANTIATE(double)
#undef FEWSHOT_INSTANTIATE

template Tensor<unsigned char> mirror_horizontal<unsigned char>(const Tensor<unsigned char>&);

}  // namespace fewshot::nn

namespace fewshot::nn {

std::string loss_curve_csv(const LossCurve& curve) {
  std::string out = "epoch,mean_loss\n";
  char line[64];
  for (std::size_t e = 0; e < curve.size(); ++e) {
    std::snprintf(line, sizeof line, "%zu,%.9g\n", e + 1, curve[e]);
    out += line;
  }
  return out;
}

template <typename T>
Tensor<T> normalize_image(const Tensor<float>& image) {
  Tensor<T> out(image.channels(), image.height(), image.width());
  for (std::size_t i = 0; i < image.size(); ++i)
    out.data()[i] = static_cast<T>(image.data()[i]) * T(2) - T(1);
  return out;
}

template Tensor<float> normalize_image<float>(const Tensor<float>&);
template Tensor<double> normalize_image<double>(const Tensor<float>&);

}  // namespace fewshot::nn

namespace fewshot::nn {

template <typename T>
double softmax_cross_entropy(const Tensor<T>& scores, const std::vector<int>& targets,
                             Tensor<T>* grad) {
  const std::size_t cells = scores.plane();
  if (targets.size() != cells)
    throw ArgumentError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                        " targets for a " + shape_of(scores) + " score map");
  if (grad != nullptr) *grad = Tensor<T>(scores.channels(), scores.height(), scores.width());
  const int classes = scores.channels();
  std::size_t counted = 0;
  for (int t : targets) {
    if (t != kIgnoreTarget && (t < 0 || t >= classes))
      throw ArgumentError("softmax_cross_entropy: target out of range");
    counted += t != kIgnoreTarget;
  }
  if (counted == 0) return 0.0;
  double total = 0.0;
  std::vector<double> p(classes);
  for (std::size_t i = 0; i < cells; ++i) {
    const int t = targets[i];
    if (t == kIgnoreTarget) continue;
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < classes; ++c) m = std::max(m, static_cast<double>(scores.data()[c * cells + i]));
    double z = 0.0;
    for (int c = 0; c < classes; ++c) z += p[c] = std::exp(static_cast<double>(scores.data()[c * cells + i]) - m);
    total += std::log(z) - (static_cast<double>(scores.data()[t * cells + i]) - m);
    if (grad != nullptr)
      for (int c = 0; c < classes; ++c)
        grad->data()[c * cells + i] = static_cast<T>((p[c] / z - (c == t ? 1.0 : 0.0)) / counted);
  }
  return total / static_cast<double>(counted);
}

template double softmax_cross_entropy<float>(const Tensor<float>&, const std::vector<int>&, Tensor<float>*);
template double softmax_cross_entropy<double>(const Tensor<double>&, const std::vector<int>&, Tensor<double>*);

}  // namespace fewshot::nn

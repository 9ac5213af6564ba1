#include "fewshot/objectness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fewshot/errors.hpp"
#include "fewshot/kernels.hpp"
#include "fewshot/log.hpp"

namespace fewshot {

using kernels::ConvShape;

ObjectnessArch ObjectnessArch::from_preset(const std::string& name) {
  if (name == "small") return {name, {16, 32, 64}};
  if (name == "medium") return {name, {32, 64, 128}};
  if (name == "large") return {name, {64, 128, 256}};
  throw ConfigError("unknown objectness preset '" + name + "' (expected small, medium or large)");
}

const std::vector<std::string>& ObjectnessArch::preset_names() {
  static const std::vector<std::string> names = {"small", "medium", "large"};
  return names;
}

template <typename T>
ObjectnessNet<T>::ObjectnessNet(ObjectnessArch arch, Rng& rng) : arch_(std::move(arch)) {
  const auto [w1, w2, w3] = arch_.widths;
  encoder_ = {nn::Conv2d<T>("obj.enc1a", ConvShape{3, w1, 3, 2, 1}),
              nn::Conv2d<T>("obj.enc1b", ConvShape{w1, w1, 3, 1, 1}),
              nn::Conv2d<T>("obj.enc2a", ConvShape{w1, w2, 3, 2, 1}),
              nn::Conv2d<T>("obj.enc2b", ConvShape{w2, w2, 3, 1, 1}),
              nn::Conv2d<T>("obj.enc3a", ConvShape{w2, w3, 3, 2, 1}),
              nn::Conv2d<T>("obj.enc3b", ConvShape{w3, w3, 3, 1, 1})};
  decoder_ = {nn::Conv2d<T>("obj.dec3", ConvShape{w3 + w2, w2, 3, 1, 1}),
              nn::Conv2d<T>("obj.dec2", ConvShape{w2 + w1, w1, 3, 1, 1}),
              nn::Conv2d<T>("obj.dec1", ConvShape{w1 + 3, w1, 3, 1, 1})};
  head_ = nn::Conv2d<T>("obj.head", ConvShape{w1, 1, 1, 1, 0});
  for (auto& c : encoder_) c.init(rng);
  for (auto& c : decoder_) c.init(rng);
  head_.init(rng);
}

template <typename T>
typename ObjectnessNet<T>::Trace ObjectnessNet<T>::forward(const Image& image) const {
  if (image.channels() != 3 || image.height() % 8 != 0 || image.width() % 8 != 0 || image.empty())
    throw ArgumentError("objectness: image " + shape_of(image) +
                        " must be 3 channels with sides divisible by 8");
  Trace t;
  t.input = nn::normalize_image<T>(image);
  const Tensor<T>* x = &t.input;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    t.enc[i] = nn::relu(encoder_[i].forward(*x));
    x = &t.enc[i];
  }
  // Skips: dec3 <- e2b, dec2 <- e1b, dec1 <- input.
  const std::array<const Tensor<T>*, 3> skips = {&t.enc[3], &t.enc[1], &t.input};
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor<T> up = kernels::resize_bilinear(*x, skips[i]->height(), skips[i]->width());
    t.cat[i] = nn::concat_channels<T>({&up, skips[i]});
    t.dec[i] = nn::relu(decoder_[i].forward(t.cat[i]));
    x = &t.dec[i];
  }
  t.logits = head_.forward(*x);
  t.probs = nn::sigmoid(t.logits);
  return t;
}

template <typename T>
Tensor<T> ObjectnessNet<T>::backward(const Trace& t, const Tensor<T>& grad_logits,
                                     bool need_input_grad) {
  Tensor<T> g = head_.backward(t.dec[2], grad_logits);
  // Gradients arriving at the skip sources, added once the encoder is reached.
  std::array<Tensor<T>, 3> skip_grads;
  for (int i = 2; i >= 0; --i) {
    g = nn::relu_backward(t.dec[i], std::move(g));
    Tensor<T> gcat = decoder_[i].backward(t.cat[i], g, true);
    const int skip_channels = i == 2 ? 3 : arch_.widths[1 - i];
    auto parts = nn::split_channels(gcat, {gcat.channels() - skip_channels, skip_channels});
    skip_grads[i] = std::move(parts[1]);
    const Tensor<T>& below = i == 0 ? t.enc[5] : t.dec[i - 1];
    g = kernels::resize_bilinear_backward(parts[0], below.height(), below.width());
  }
  for (int i = 5; i >= 0; --i) {
    if (i == 3) g += skip_grads[0];
    if (i == 1) g += skip_grads[1];
    g = nn::relu_backward(t.enc[i], std::move(g));
    const Tensor<T>& in = i == 0 ? t.input : t.enc[i - 1];
    g = encoder_[i].backward(in, g, i > 0 || need_input_grad);
  }
  if (need_input_grad) g += skip_grads[2];
  return g;
}

template <typename T>
nn::ParamRefs<T> ObjectnessNet<T>::parameters() {
  nn::ParamRefs<T> out;
  for (auto& c : encoder_) c.collect(out);
  for (auto& c : decoder_) c.collect(out);
  head_.collect(out);
  return out;
}

template <typename T>
std::size_t ObjectnessNet<T>::parameter_count() {
  return nn::count_parameters(parameters());
}

ObjectnessMap predict_objectness(const ObjectnessNet<float>& net, const Image& image) {
  if (!image.all_finite()) throw ValidationError("predict_objectness: non-finite input image");
  return {net.forward(image).probs};
}

namespace {
BinaryMask aligned(const BinaryMask& gt, int h, int w) {
  return (gt.height() == h && gt.width() == w) ? gt : gt.resized(h, w);
}
}  // namespace

template <typename T>
double objectness_loss(const ProbabilityMap<T>& pred, const BinaryMask& gt) {
  if (pred.probs.channels() != 1 || pred.probs.empty())
    throw ArgumentError("objectness_loss: prediction must be a single non-empty channel");
  const BinaryMask y = aligned(gt, pred.height(), pred.width());
  double total = 0.0;
  for (int r = 0; r < pred.height(); ++r)
    for (int c = 0; c < pred.width(); ++c) {
      const double p = std::clamp(static_cast<double>(pred.probs.at(0, r, c)), kProbabilityClamp,
                                  1.0 - kProbabilityClamp);
      total -= y.get(r, c) ? std::log(p) : std::log1p(-p);
    }
  return total / static_cast<double>(pred.probs.size());
}

template <typename T>
Tensor<T> objectness_loss_grad(const Tensor<T>& probs, const BinaryMask& gt) {
  const BinaryMask y = aligned(gt, probs.height(), probs.width());
  Tensor<T> g(1, probs.height(), probs.width());
  const T inv = T(1) / static_cast<T>(probs.size());
  for (int r = 0; r < probs.height(); ++r)
    for (int c = 0; c < probs.width(); ++c)
      g.at(0, r, c) = (probs.at(0, r, c) - (y.get(r, c) ? T(1) : T(0))) * inv;
  return g;
}

ObjectnessTraining train_objectness(ObjectnessNet<float>& net, const ClassAgnosticFeed& feed,
                                    const nn::Schedule& schedule, Rng& rng) {
  if (feed.size() == 0) throw ArgumentError("train_objectness: empty training feed");
  if (schedule.batch_size < 1 || schedule.epochs < 0)
    throw ArgumentError("train_objectness: invalid schedule");
  const nn::Sgd<float> sgd(schedule.sgd);
  const auto params = net.parameters();
  nn::zero_grad(params);
  ObjectnessTraining result;
  std::vector<std::size_t> order(feed.size());
  for (int epoch = 1; epoch <= schedule.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double epoch_loss = 0.0;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + schedule.batch_size);
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const SemanticSample s = horizontal_flip(feed.at(order[k]), rng, schedule.flip_probability);
        const BinaryMask gt = derive_objectness_labels(s);
        const auto trace = net.forward(s.image);
        batch_loss += objectness_loss(ProbabilityMap<float>{trace.probs}, gt);
        net.backward(trace, objectness_loss_grad(trace.probs, gt));
      }
      if (!std::isfinite(batch_loss))
        throw NumericError("objectness training diverged: non-finite loss at epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(batch) +
                           ", learning rate " + std::to_string(schedule.sgd.learning_rate));
      sgd.step(params, 1.0 / static_cast<double>(end - start));
      epoch_loss += batch_loss;
    }
    result.curve.push_back(epoch_loss / static_cast<double>(order.size()));
    result.epochs_completed = epoch;
    log::info("objectness[" + net.arch().preset + "] epoch " + std::to_string(epoch) + "/" +
              std::to_string(schedule.epochs) + " loss " + std::to_string(result.curve.back()));
  }
  return result;
}

template class ObjectnessNet<float>;
template class ObjectnessNet<double>;
template double objectness_loss<float>(const ProbabilityMap<float>&, const BinaryMask&);
template double objectness_loss<double>(const ProbabilityMap<double>&, const BinaryMask&);
template Tensor<float> objectness_loss_grad<float>(const Tensor<float>&, const BinaryMask&);
template Tensor<double> objectness_loss_grad<double>(const Tensor<double>&, const BinaryMask&);

}  // namespace fewshot

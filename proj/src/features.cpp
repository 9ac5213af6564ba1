#include "fewshot/features.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fewshot/kernels.hpp"
#include "fewshot/log.hpp"

namespace fewshot {

using kernels::ConvShape;

ExtractorArch ExtractorArch::from_preset(const std::string& name, int feature_dims) {
  if (feature_dims < 1) throw ConfigError("feature_dims must be positive");
  if (name == "tinyA") return {name, 32, 64, feature_dims};
  if (name == "tinyB") return {name, 48, 96, feature_dims};
  if (name == "tinyC") return {name, 64, 128, feature_dims};
  throw ConfigError("unknown extractor preset '" + name + "' (expected tinyA, tinyB or tinyC)");
}

const std::vector<std::string>& ExtractorArch::preset_names() {
  static const std::vector<std::string> names = {"tinyA", "tinyB", "tinyC"};
  return names;
}

template <typename T>
FeatureExtractor<T>::FeatureExtractor(ExtractorArch arch, Rng& rng) : arch_(std::move(arch)) {
  const int s = arch_.stem, r = arch_.raw_channels;
  backbone_ = {nn::Conv2d<T>("fx.conv1", ConvShape{3, s, 3, 2, 1}),
               nn::Conv2d<T>("fx.conv2", ConvShape{s, s, 3, 1, 1}),
               nn::Conv2d<T>("fx.conv3", ConvShape{s, r, 3, 2, 1}),
               nn::Conv2d<T>("fx.conv4", ConvShape{r, r, 3, 1, 1})};
  projection_ = nn::Conv2d<T>("fx.project", ConvShape{r, arch_.feature_dims, 1, 1, 0});
  for (auto& c : backbone_) c.init(rng);
  projection_.init(rng);
}

template <typename T>
typename FeatureExtractor<T>::Trace FeatureExtractor<T>::forward(const Image& image) const {
  if (image.channels() != 3 || image.height() % ExtractorArch::kStride != 0 || image.width() % ExtractorArch::kStride != 0)
    throw ArgumentError("extractor: image " + shape_of(image) + " must be 3 channels with sides divisible by 4");
  Trace t;
  t.input = nn::normalize_image<T>(image);
  const Tensor<T>* x = &t.input;
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    t.backbone[i] = nn::relu(backbone_[i].forward(*x));
    x = &t.backbone[i];
  }
  t.features = nn::relu(projection_.forward(*x));
  return t;
}

template <typename T>
void FeatureExtractor<T>::backward(const Trace& t, const Tensor<T>& grad_features) {
  Tensor<T> g = nn::relu_backward(t.features, grad_features);
  g = projection_.backward(t.backbone[3], g, true);
  for (int i = 3; i >= 0; --i) {
    g = nn::relu_backward(t.backbone[i], std::move(g));
    g = backbone_[i].backward(i == 0 ? t.input : t.backbone[i - 1], g, i > 0);
  }
}

template <typename T>
nn::ParamRefs<T> FeatureExtractor<T>::parameters() {
  nn::ParamRefs<T> out;
  for (auto& c : backbone_) c.collect(out);
  projection_.collect(out);
  return out;
}

template <typename T>
nn::ParamRefs<T> FeatureExtractor<T>::trainable_parameters() {
  nn::ParamRefs<T> out;
  if (!backbone_frozen)
    for (auto& c : backbone_) c.collect(out);
  if (!projection_frozen) projection_.collect(out);
  return out;
}

FeatureMap<float> extract_features(const FeatureExtractor<float>& fx, const Image& image) {
  if (!image.all_finite()) throw ValidationError("extract_features: non-finite input image");
  return fx.forward(image).features;
}

namespace {

template <typename T>
BinaryMask support_mask_on_grid(const FeatureMap<T>& f, const BinaryMask& mask, int index) {
  const BinaryMask m = mask.resized(f.height(), f.width());
  if (m.count() == 0)
    throw EmptySupportError(index, "mask has no foreground cell on the " +
                                       std::to_string(f.height()) + "x" + std::to_string(f.width()) +
                                       " feature grid");
  return m;
}

}  // namespace

template <typename T>
SupportVector<T> masked_average_pooling(const std::vector<FeatureMap<T>>& features,
                                        const std::vector<BinaryMask>& masks) {
  if (features.empty() || features.size() != masks.size())
    throw ArgumentError("masked_average_pooling: need K >= 1 feature maps and as many masks");
  const int d = features.front().channels();
  std::vector<double> acc(d, 0.0);
  for (std::size_t k = 0; k < features.size(); ++k) {
    const auto& f = features[k];
    if (f.channels() != d) throw ArgumentError("masked_average_pooling: channel count differs across supports");
    const BinaryMask m = support_mask_on_grid(f, masks[k], static_cast<int>(k));
    const double inv = 1.0 / static_cast<double>(m.count());
    for (int c = 0; c < d; ++c) {
      const T* plane = f.channel(c);
      double s = 0.0;
      for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x)
          if (m.get(y, x)) s += plane[y * f.width() + x];
      acc[c] += s * inv;
    }
  }
  SupportVector<T> v;
  v.values.resize(d);
  for (int c = 0; c < d; ++c) v.values[c] = static_cast<T>(acc[c] / static_cast<double>(features.size()));
  return v;
}

template <typename T>
std::vector<FeatureMap<T>> masked_average_pooling_backward(const std::vector<FeatureMap<T>>& features,
                                                           const std::vector<BinaryMask>& masks,
                                                           const std::vector<T>& grad_vector) {
  std::vector<FeatureMap<T>> grads;
  const T inv_k = T(1) / static_cast<T>(features.size());
  for (std::size_t k = 0; k < features.size(); ++k) {
    const auto& f = features[k];
    const BinaryMask m = support_mask_on_grid(f, masks[k], static_cast<int>(k));
    const T scale = inv_k / static_cast<T>(m.count());
    FeatureMap<T> g(f.channels(), f.height(), f.width());
    for (int c = 0; c < f.channels(); ++c)
      for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x)
          if (m.get(y, x)) g.at(c, y, x) = grad_vector[c] * scale;
    grads.push_back(std::move(g));
  }
  return grads;
}

template <typename T>
FeatureMap<T> tile_support(const SupportVector<T>& v, int height, int width) {
  if (height < 1 || width < 1) throw ArgumentError("tile_support: grid must be at least 1x1");
  FeatureMap<T> out(v.dims(), height, width);
  for (int c = 0; c < v.dims(); ++c) std::fill(out.channel(c), out.channel(c) + out.plane(), v.values[c]);
  return out;
}

template <typename T>
std::vector<T> tile_support_backward(const FeatureMap<T>& grad) {
  std::vector<T> g(grad.channels());
  for (int c = 0; c < grad.channels(); ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < grad.plane(); ++i) s += grad.channel(c)[i];
    g[c] = static_cast<T>(s);
  }
  return g;
}

PretrainResult pretrain_extractor(FeatureExtractor<float>& fx, const Dataset& dataset,
                                  const std::vector<std::size_t>& pool,
                                  const std::set<CategoryId>& categories,
                                  const nn::Schedule& schedule, Rng& rng) {
  if (pool.empty()) throw ArgumentError("pretrain_extractor: empty training pool");
  // Categories map to classes 0..n-1 in ascending order. Background cells
  // carry no target, so the features are never taught object vs background.
  std::map<CategoryId, int> class_of;
  for (CategoryId c : categories) class_of.emplace(c, static_cast<int>(class_of.size()));
  const int classes = static_cast<int>(class_of.size());

  Rng head_rng = make_rng(rng(), "pretrain-head");
  nn::Conv2d<float> head("pretrain.head", ConvShape{fx.feature_dims(), classes, 1, 1, 0});
  head.init(head_rng);

  auto params = fx.parameters();
  head.collect(params);
  const nn::Sgd<float> sgd(schedule.sgd);
  nn::zero_grad(params);

  PretrainResult result;
  std::vector<std::size_t> order = pool;
  for (int epoch = 1; epoch <= schedule.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double epoch_loss = 0.0;
    std::size_t correct = 0, cells = 0;
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      const std::size_t end = std::min(order.size(), start + schedule.batch_size);
      for (std::size_t k = start; k < end; ++k) {
        const SemanticSample s = horizontal_flip(dataset.sample(order[k]), rng, schedule.flip_probability);
        const auto trace = fx.forward(s.image);
        const auto& f = trace.features;
        const LabelMap grid = kernels::resize_nearest(s.labels, f.height(), f.width());
        std::vector<int> targets(grid.size(), nn::kIgnoreTarget);
        for (std::size_t i = 0; i < grid.size(); ++i) {
          if (grid.data()[i] == kBackground) continue;
          const auto it = class_of.find(grid.data()[i]);
          if (it == class_of.end())
            throw AuditError("pretrain_extractor: sample " + s.id + " contains category " +
                             std::to_string(grid.data()[i]) + " outside the training categories");
          targets[i] = it->second;
        }
        const Tensor<float> scores = head.forward(f);
        Tensor<float> gscores;
        const double loss = nn::softmax_cross_entropy(scores, targets, &gscores);
        if (!std::isfinite(loss))
          throw NumericError("extractor pretraining diverged at epoch " + std::to_string(epoch));
        epoch_loss += loss;
        for (std::size_t i = 0; i < targets.size(); ++i) {
          if (targets[i] == nn::kIgnoreTarget) continue;
          int best = 0;
          for (int c = 1; c < classes; ++c)
            if (scores.data()[c * scores.plane() + i] > scores.data()[best * scores.plane() + i]) best = c;
          correct += best == targets[i];
          ++cells;
        }
        fx.backward(trace, head.backward(f, gscores, true));
      }
      sgd.step(params, 1.0 / static_cast<double>(end - start));
    }
    result.curve.push_back(epoch_loss / static_cast<double>(order.size()));
    result.final_accuracy = cells == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(cells);
    log::info("extractor[" + fx.arch().preset + "] epoch " + std::to_string(epoch) + "/" +
              std::to_string(schedule.epochs) + " loss " + std::to_string(result.curve.back()) +
              " object-cell accuracy " + std::to_string(result.final_accuracy));
  }
  return result;
}

template class FeatureExtractor<float>;
template class FeatureExtractor<double>;

#define FEWSHOT_INSTANTIATE(T)                                                                        \
  template SupportVector<T> masked_average_pooling<T>(const std::vector<FeatureMap<T>>&,              \
                                                      const std::vector<BinaryMask>&);                \
  template std::vector<FeatureMap<T>> masked_average_pooling_backward<T>(                             \
      const std::vector<FeatureMap<T>>&, const std::vector<BinaryMask>&, const std::vector<T>&);      \
  template FeatureMap<T> tile_support<T>(const SupportVector<T>&, int, int);                          \
  template std::vector<T> tile_support_backward<T>(const FeatureMap<T>&);

FEWSHOT_INSTANTIATE(float)
FEWSHOT_INSTANTIATE(double)
#undef FEWSHOT_INSTANTIATE

}  // namespace fewshot

#pragma once

#include <string>
#include <vector>

#include "fewshot/data.hpp"
#include "fewshot/errors.hpp"
#include "fewshot/nn.hpp"

namespace fewshot {

/// h x w x d feature map stored as a (d, h, w) tensor.
template <typename T>
using FeatureMap = Tensor<T>;

/// Masked-average-pooled prototype of the target category.
template <typename T>
struct SupportVector {
  std::vector<T> values;
  int dims() const { return static_cast<int>(values.size()); }
};

/// Thrown when a support mask has no foreground cell on the feature grid.
class EmptySupportError : public ArgumentError {
 public:
  EmptySupportError(int support_index, const std::string& detail)
      : ArgumentError("support " + std::to_string(support_index) + ": " + detail),
        index_(support_index) {}
  int support_index() const { return index_; }

 private:
  int index_;
};

/// Backbone widths per preset. Every preset has two stride-2 stages, so the
/// feature grid is the input grid divided by 4.
struct ExtractorArch {
  std::string preset = "tinyA";
  int stem = 32;
  int raw_channels = 64;
  int feature_dims = 256;

  static ExtractorArch from_preset(const std::string& name, int feature_dims = 256);
  static const std::vector<std::string>& preset_names();
  static constexpr int kStride = 4;
};

/// Backbone (four 3x3 convolutions, two of them stride 2) followed by a 1x1
/// projection to feature_dims channels and a ReLU.
template <typename T>
class FeatureExtractor {
 public:
  struct Trace {
    Tensor<T> input;
    std::array<Tensor<T>, 4> backbone;
    Tensor<T> features;
  };

  FeatureExtractor() = default;
  FeatureExtractor(ExtractorArch arch, Rng& rng);

  const ExtractorArch& arch() const { return arch_; }
  int feature_dims() const { return arch_.feature_dims; }

  Trace forward(const Image& image) const;
  /// Accumulates gradients for the whole extractor (used only when fine-tuning).
  void backward(const Trace& trace, const Tensor<T>& grad_features);

  bool backbone_frozen = true;
  bool projection_frozen = true;

  nn::ParamRefs<T> parameters();
  /// Parameters whose sub-part is not frozen.
  nn::ParamRefs<T> trainable_parameters();

 private:
  ExtractorArch arch_;
  std::array<nn::Conv2d<T>, 4> backbone_;
  nn::Conv2d<T> projection_;
};

/// Same extractor for query and supports; rejects non-finite images.
FeatureMap<float> extract_features(const FeatureExtractor<float>& fx, const Image& image);

/// Per-image masked mean over the mask's foreground cells (mask resized to
/// the feature grid by nearest neighbour), then the unweighted mean over the
/// K images.
template <typename T>
SupportVector<T> masked_average_pooling(const std::vector<FeatureMap<T>>& features,
                                        const std::vector<BinaryMask>& masks);

/// Gradient of masked_average_pooling with respect to each feature map.
template <typename T>
std::vector<FeatureMap<T>> masked_average_pooling_backward(const std::vector<FeatureMap<T>>& features,
                                                           const std::vector<BinaryMask>& masks,
                                                           const std::vector<T>& grad_vector);

/// Repeats v at every location of an h x w grid.
template <typename T>
FeatureMap<T> tile_support(const SupportVector<T>& v, int height, int width);

/// Adjoint of tile_support: spatial sum per channel.
template <typename T>
std::vector<T> tile_support_backward(const FeatureMap<T>& grad);

/// Desk-scale stand-in for ImageNet initialisation: train the extractor with
/// a per-cell category classifier over object cells of the training pool
/// (background cells are ignored), then drop the head.
struct PretrainResult {
  nn::LossCurve curve;
  double final_accuracy = 0.0;
};

PretrainResult pretrain_extractor(FeatureExtractor<float>& fx, const Dataset& dataset,
                                  const std::vector<std::size_t>& pool,
                                  const std::set<CategoryId>& categories,
                                  const nn::Schedule& schedule, Rng& rng);

}  // namespace fewshot

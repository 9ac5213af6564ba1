#pragma once

#include <array>
#include <string>

#include "fewshot/data.hpp"
#include "fewshot/nn.hpp"

namespace fewshot {

/// Class-agnostic foreground probability per pixel, 1 x h x w in [0,1].
template <typename T>
struct ProbabilityMap {
  Tensor<T> probs;
  int height() const { return probs.height(); }
  int width() const { return probs.width(); }
};
using ObjectnessMap = ProbabilityMap<float>;

/// Encoder widths of the three stride-2 stages. Presets: small 16/32/64,
/// medium 32/64/128, large 64/128/256.
struct ObjectnessArch {
  std::string preset = "small";
  std::array<int, 3> widths{16, 32, 64};

  static ObjectnessArch from_preset(const std::string& name);
  static const std::vector<std::string>& preset_names();
};

/// Encoder-decoder with skip connections and a sigmoid head at input resolution.
/// Input height and width must be multiples of 8.
template <typename T>
class ObjectnessNet {
 public:
  struct Trace {
    Tensor<T> input;
    std::array<Tensor<T>, 6> enc;  // e1a e1b e2a e2b e3a e3b (post-ReLU)
    std::array<Tensor<T>, 3> cat;  // decoder inputs after upsample + skip concat
    std::array<Tensor<T>, 3> dec;  // decoder outputs (post-ReLU), coarse to fine
    Tensor<T> logits;
    Tensor<T> probs;
  };

  ObjectnessNet() = default;
  ObjectnessNet(ObjectnessArch arch, Rng& rng);

  const ObjectnessArch& arch() const { return arch_; }

  Trace forward(const Image& image) const;
  /// Back-propagates dL/dlogits; returns dL/d(normalised input) if requested.
  Tensor<T> backward(const Trace& trace, const Tensor<T>& grad_logits, bool need_input_grad = false);

  nn::ParamRefs<T> parameters();
  std::size_t parameter_count();

 private:
  ObjectnessArch arch_;
  std::array<nn::Conv2d<T>, 6> encoder_;
  std::array<nn::Conv2d<T>, 3> decoder_;
  nn::Conv2d<T> head_;
};

/// Runs the net; rejects non-finite or out-of-range images.
ObjectnessMap predict_objectness(const ObjectnessNet<float>& net, const Image& image);

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
/// gt is aligned to the prediction grid by nearest-neighbour if needed.
template <typename T>
double objectness_loss(const ProbabilityMap<T>& pred, const BinaryMask& gt);

/// dL/dlogits of objectness_loss for a sigmoid head: (p - y) / N.
template <typename T>
Tensor<T> objectness_loss_grad(const Tensor<T>& probs, const BinaryMask& gt);

inline constexpr double kProbabilityClamp = 1e-7;

struct ObjectnessTraining {
  nn::LossCurve curve;
  int epochs_completed = 0;
};

/// Mini-batch SGD on (image, derive_objectness_labels(image)) pairs drawn from
/// the feed. Throws NumericError (with epoch, batch and learning rate) on a
/// non-finite loss.
ObjectnessTraining train_objectness(ObjectnessNet<float>& net, const ClassAgnosticFeed& feed,
                                    const nn::Schedule& schedule, Rng& rng);

}  // namespace fewshot

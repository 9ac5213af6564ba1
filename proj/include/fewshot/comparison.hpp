#pragma once

#include <array>
#include <optional>
#include <string>

#include "fewshot/data.hpp"
#include "fewshot/features.hpp"
#include "fewshot/nn.hpp"
#include "fewshot/objectness.hpp"

namespace fewshot {

enum class HeadVariant { aspp, fem };

HeadVariant parse_head_variant(const std::string& name);
std::string to_string(HeadVariant v);

/// Layout of the dense comparison head.
///
/// fused (2d [+1]) -> 1x1 reduce -> four multi-scale branches -> concat ->
/// 3x3 fuse1 -> 3x3 fuse2 -> 1x1 classifier (2 scores: background, foreground).
struct HeadArch {
  HeadVariant variant = HeadVariant::aspp;
  int feature_dims = 256;
  bool use_objectness = true;
  int reduce = 64;
  int branch = 64;
  int fuse1 = 128;
  int fuse2 = 64;
  std::array<int, 4> rates{1, 2, 4, 8};  // ASPP dilations

  int input_channels() const { return 2 * feature_dims + (use_objectness ? 1 : 0); }
};

template <typename T>
class ComparisonHead {
 public:
  struct MultiScaleTrace {
    Tensor<T> reduced;
    std::array<Tensor<T>, 4> branch_in;   // FEM: pooled input plus top-down term
    std::array<Tensor<T>, 4> branch_out;  // post-ReLU, at the branch's own scale
    Tensor<T> concat;
    Tensor<T> fused1;
    Tensor<T> output;  // post-ReLU fuse2, same grid as the input
  };
  struct Trace {
    Tensor<T> input;
    MultiScaleTrace ms;
    Tensor<T> scores;
  };

  ComparisonHead() = default;
  /// Initialisation is paired across the objectness ablation: the shared
  /// weights are drawn identically whether or not the objectness channel exists.
  ComparisonHead(HeadArch arch, std::uint64_t seed);

  const HeadArch& arch() const { return arch_; }

  MultiScaleTrace multiscale(const Tensor<T>& fused) const;
  Trace forward(const Tensor<T>& fused) const;
  /// Returns dL/dfused.
  Tensor<T> backward(const Trace& trace, const Tensor<T>& grad_scores);

  nn::ParamRefs<T> parameters();

  nn::Conv2d<T>& branch(int i) { return branches_[i]; }

 private:
  Tensor<T> backward_multiscale(const MultiScaleTrace& t, Tensor<T> grad_output);

  HeadArch arch_;
  nn::Conv2d<T> reduce_;
  std::array<nn::Conv2d<T>, 4> branches_;
  nn::Conv2d<T> fuse1_;
  nn::Conv2d<T> fuse2_;
  nn::Conv2d<T> classifier_;
};

/// [query_feat | tile(v) | objectness resized bilinearly to the feature grid].
/// Pass std::nullopt for the no-objectness ablation (2d channels).
template <typename T>
Tensor<T> assemble_input(const FeatureMap<T>& query_feat, const SupportVector<T>& v,
                         const std::optional<ProbabilityMap<T>>& objectness);

/// Runs the multi-scale stage and the two fusion convolutions.
template <typename T>
FeatureMap<T> multiscale_forward(const ComparisonHead<T>& head, const Tensor<T>& fused);

struct SegmentationPrediction {
  Tensor<float> probs;  // 1 x H x W foreground probability
  BinaryMask binary;    // probs >= 0.5
};

inline constexpr float kDecisionThreshold = 0.5f;

/// Foreground softmax probability on the score grid.
template <typename T>
Tensor<T> foreground_probability(const Tensor<T>& scores);

/// Softmax, bilinear upsampling to the output size, threshold (ties count as foreground).
SegmentationPrediction predict_from_scores(const Tensor<float>& scores, int height, int width);
SegmentationPrediction predict_segmentation(const ComparisonHead<float>& head,
                                            const Tensor<float>& fused, int height, int width);

/// Mean two-way cross-entropy; gt is resized to the score grid by nearest neighbour.
template <typename T>
double segmentation_loss(const Tensor<T>& scores, const BinaryMask& gt, Tensor<T>* grad = nullptr);

}  // namespace fewshot

#include "fewshot/comparison.hpp"

#include <cmath>

#include "fewshot/errors.hpp"
#include "fewshot/kernels.hpp"

namespace fewshot {

using kernels::ConvShape;

HeadVariant parse_head_variant(const std::string& name) {
  if (name == "aspp") return HeadVariant::aspp;
  if (name == "fem") return HeadVariant::fem;
  throw ConfigError("unknown head variant '" + name + "' (expected aspp or fem)");
}

std::string to_string(HeadVariant v) { return v == HeadVariant::aspp ? "aspp" : "fem"; }

template <typename T>
ComparisonHead<T>::ComparisonHead(HeadArch arch, std::uint64_t seed) : arch_(arch) {
  const int in = arch_.input_channels();
  const int shared = 2 * arch_.feature_dims;
  if (arch_.variant == HeadVariant::fem && arch_.branch != arch_.reduce)
    throw ArgumentError("FEM head: top-down merging needs branch width == reduce width (" +
                        std::to_string(arch_.branch) + " vs " + std::to_string(arch_.reduce) + ")");
  reduce_ = nn::Conv2d<T>("head.reduce", ConvShape{in, arch_.reduce, 1, 1, 0});
  {
    // Paired init: class-specific columns come from one stream, the
    // objectness column from another, both with the same scale.
    Rng main = make_rng(seed, "head.reduce");
    Rng extra = make_rng(seed, "head.reduce.objectness");
    const double stddev = std::sqrt(2.0 / shared);
    auto& w = reduce_.weight().value;
    for (int o = 0; o < arch_.reduce; ++o) {
      for (int c = 0; c < shared; ++c) w[static_cast<std::size_t>(o) * in + c] = static_cast<T>(normal(main) * stddev);
      if (arch_.use_objectness) w[static_cast<std::size_t>(o) * in + shared] = static_cast<T>(normal(extra) * stddev);
    }
  }
  for (int i = 0; i < 4; ++i) {
    ConvShape s{arch_.reduce, arch_.branch, 3, 1, 1, 1};
    if (arch_.variant == HeadVariant::aspp) {
      s.dilation = s.padding = arch_.rates[i];
    } else if (i == 3) {
      s.kernel = 1;
      s.padding = 0;
    }
    branches_[i] = nn::Conv2d<T>("head.branch" + std::to_string(i), s);
    Rng r = make_rng(seed, "head.branch", i);
    branches_[i].init(r);
  }
  fuse1_ = nn::Conv2d<T>("head.fuse1", ConvShape{4 * arch_.branch, arch_.fuse1, 3, 1, 1});
  fuse2_ = nn::Conv2d<T>("head.fuse2", ConvShape{arch_.fuse1, arch_.fuse2, 3, 1, 1});
  classifier_ = nn::Conv2d<T>("head.classifier", ConvShape{arch_.fuse2, 2, 1, 1, 0});
  Rng r1 = make_rng(seed, "head.fuse1"), r2 = make_rng(seed, "head.fuse2"),
      r3 = make_rng(seed, "head.classifier");
  fuse1_.init(r1);
  fuse2_.init(r2);
  classifier_.init(r3);
}

template <typename T>
typename ComparisonHead<T>::MultiScaleTrace ComparisonHead<T>::multiscale(const Tensor<T>& fused) const {
  if (fused.channels() != arch_.input_channels())
    throw ArgumentError("comparison head expects " + std::to_string(arch_.input_channels()) +
                        " input channels, got " + std::to_string(fused.channels()));
  MultiScaleTrace t;
  t.reduced = nn::relu(reduce_.forward(fused));
  const int h = fused.height(), w = fused.width();
  if (arch_.variant == HeadVariant::aspp) {
    for (int i = 0; i < 4; ++i) t.branch_out[i] = nn::relu(branches_[i].forward(t.reduced));
    t.concat = nn::concat_channels<T>({&t.branch_out[0], &t.branch_out[1], &t.branch_out[2], &t.branch_out[3]});
  } else {
    if (h % 4 != 0 || w % 4 != 0)
      throw ArgumentError("FEM head needs a feature grid divisible by 4, got " + shape_of(fused));
    const std::array<std::pair<int, int>, 4> factors = {{{1, 1}, {2, 2}, {4, 4}, {h, w}}};
    // Coarse to fine: each branch sees its pooled input plus the upsampled
    // output of the next-coarser branch.
    for (int i = 3; i >= 0; --i) {
      t.branch_in[i] = i == 0 ? t.reduced : kernels::avg_pool(t.reduced, factors[i].first, factors[i].second);
      if (i < 3)
        t.branch_in[i] += kernels::resize_bilinear(t.branch_out[i + 1], t.branch_in[i].height(),
                                                   t.branch_in[i].width());
      t.branch_out[i] = nn::relu(branches_[i].forward(t.branch_in[i]));
    }
    std::array<Tensor<T>, 4> up;
    for (int i = 0; i < 4; ++i) up[i] = kernels::resize_bilinear(t.branch_out[i], h, w);
    t.concat = nn::concat_channels<T>({&up[0], &up[1], &up[2], &up[3]});
  }
  t.fused1 = nn::relu(fuse1_.forward(t.concat));
  t.output = nn::relu(fuse2_.forward(t.fused1));
  return t;
}

template <typename T>
typename ComparisonHead<T>::Trace ComparisonHead<T>::forward(const Tensor<T>& fused) const {
  Trace t;
  t.input = fused;
  t.ms = multiscale(fused);
  t.scores = classifier_.forward(t.ms.output);
  return t;
}

template <typename T>
Tensor<T> ComparisonHead<T>::backward_multiscale(const MultiScaleTrace& t, Tensor<T> g) {
  g = nn::relu_backward(t.output, std::move(g));
  g = fuse2_.backward(t.fused1, g);
  g = nn::relu_backward(t.fused1, std::move(g));
  g = fuse1_.backward(t.concat, g);
  auto parts = nn::split_channels(g, {arch_.branch, arch_.branch, arch_.branch, arch_.branch});

  Tensor<T> g_reduced(t.reduced.channels(), t.reduced.height(), t.reduced.width());
  if (arch_.variant == HeadVariant::aspp) {
    for (int i = 0; i < 4; ++i)
      g_reduced += branches_[i].backward(t.reduced, nn::relu_backward(t.branch_out[i], std::move(parts[i])));
  } else {
    const int h = t.reduced.height(), w = t.reduced.width();
    const std::array<std::pair<int, int>, 4> factors = {{{1, 1}, {2, 2}, {4, 4}, {h, w}}};
    std::array<Tensor<T>, 4> g_out;
    for (int i = 0; i < 4; ++i)
      g_out[i] = kernels::resize_bilinear_backward(parts[i], t.branch_out[i].height(), t.branch_out[i].width());
    for (int i = 0; i < 4; ++i) {
      const Tensor<T> g_in = branches_[i].backward(t.branch_in[i], nn::relu_backward(t.branch_out[i], std::move(g_out[i])));
      if (i == 0)
        g_reduced += g_in;
      else
        g_reduced += kernels::avg_pool_backward(g_in, factors[i].first, factors[i].second);
      if (i < 3)
        g_out[i + 1] += kernels::resize_bilinear_backward(g_in, t.branch_out[i + 1].height(),
                                                          t.branch_out[i + 1].width());
    }
  }
  return nn::relu_backward(t.reduced, std::move(g_reduced));
}

template <typename T>
Tensor<T> ComparisonHead<T>::backward(const Trace& t, const Tensor<T>& grad_scores) {
  Tensor<T> g = classifier_.backward(t.ms.output, grad_scores);
  g = backward_multiscale(t.ms, std::move(g));
  return reduce_.backward(t.input, g);
}

template <typename T>
nn::ParamRefs<T> ComparisonHead<T>::parameters() {
  nn::ParamRefs<T> out;
  reduce_.collect(out);
  for (auto& b : branches_) b.collect(out);
  fuse1_.collect(out);
  fuse2_.collect(out);
  classifier_.collect(out);
  return out;
}

template <typename T>
Tensor<T> assemble_input(const FeatureMap<T>& query_feat, const SupportVector<T>& v,
                         const std::optional<ProbabilityMap<T>>& objectness) {
  if (v.dims() != query_feat.channels())
    throw ArgumentError("assemble_input: support vector has " + std::to_string(v.dims()) +
                        " dims, query features have " + std::to_string(query_feat.channels()));
  const FeatureMap<T> tiled = tile_support(v, query_feat.height(), query_feat.width());
  if (!objectness) return nn::concat_channels<T>({&query_feat, &tiled});
  const Tensor<T> obj = kernels::resize_bilinear(objectness->probs, query_feat.height(), query_feat.width());
  if (obj.channels() != 1 || obj.height() != query_feat.height() || obj.width() != query_feat.width())
    throw ArgumentError("assemble_input: objectness map does not align with the feature grid");
  return nn::concat_channels<T>({&query_feat, &tiled, &obj});
}

template <typename T>
FeatureMap<T> multiscale_forward(const ComparisonHead<T>& head, const Tensor<T>& fused) {
  return head.multiscale(fused).output;
}

template <typename T>
Tensor<T> foreground_probability(const Tensor<T>& scores) {
  if (scores.channels() != 2) throw ArgumentError("expected a 2-channel score map, got " + shape_of(scores));
  Tensor<T> p(1, scores.height(), scores.width());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T bg = scores.channel(0)[i], fg = scores.channel(1)[i];
    p.data()[i] = T(1) / (T(1) + std::exp(bg - fg));
  }
  return p;
}

SegmentationPrediction predict_from_scores(const Tensor<float>& scores, int height, int width) {
  if (!scores.all_finite())
    throw NumericError("predict_segmentation: non-finite scores on a " + shape_of(scores) + " map");
  SegmentationPrediction out;
  out.probs = kernels::resize_bilinear(foreground_probability(scores), height, width);
  out.binary = BinaryMask(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out.binary.set(y, x, out.probs.at(0, y, x) >= kDecisionThreshold);
  return out;
}

SegmentationPrediction predict_segmentation(const ComparisonHead<float>& head, const Tensor<float>& fused,
                                            int height, int width) {
  return predict_from_scores(head.forward(fused).scores, height, width);
}

template <typename T>
double segmentation_loss(const Tensor<T>& scores, const BinaryMask& gt, Tensor<T>* grad) {
  if (scores.channels() != 2) throw ArgumentError("segmentation_loss: expected 2-channel scores");
  const BinaryMask m = (gt.height() == scores.height() && gt.width() == scores.width())
                           ? gt
                           : gt.resized(scores.height(), scores.width());
  std::vector<int> targets(m.bits().values().begin(), m.bits().values().end());
  return nn::softmax_cross_entropy(scores, targets, grad);
}

template class ComparisonHead<float>;
template class ComparisonHead<double>;

#define FEWSHOT_INSTANTIATE(T)                                                                    \
  template Tensor<T> assemble_input<T>(const FeatureMap<T>&, const SupportVector<T>&,             \
                                       const std::optional<ProbabilityMap<T>>&);                  \
  template FeatureMap<T> multiscale_forward<T>(const ComparisonHead<T>&, const Tensor<T>&);       \
  template Tensor<T> foreground_probability<T>(const Tensor<T>&);                                 \
  template double segmentation_loss<T>(const Tensor<T>&, const BinaryMask&, Tensor<T>*);

FEWSHOT_INSTANTIATE(float)
FEWSHOT_INSTANTIATE(double)
#undef FEWSHOT_INSTANTIATE

}  // namespace fewshot

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/kernels.hpp"
#include "fewshot/rng.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot::nn {

/// A trainable parameter: value, accumulated gradient and momentum buffer.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> velocity;

  Param() = default;
  Param(std::string n, std::vector<int> s);
  std::size_t size() const { return value.size(); }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

/// Convolution layer. Forward is const and re-entrant; backward needs the
/// forward input and accumulates parameter gradients.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, kernels::ConvShape shape, bool with_bias = true);

  /// He-normal weights, zero bias.
  void init(Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  /// Returns dL/dx (empty tensor when need_input_grad is false).
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& gy, bool need_input_grad = true);

  const kernels::ConvShape& shape() const { return shape_; }
  Param<T>& weight() { return weight_; }
  const Param<T>& weight() const { return weight_; }
  Param<T>& bias() { return bias_; }
  const Param<T>& bias() const { return bias_; }
  bool has_bias() const { return !bias_.value.empty(); }
  void collect(ParamRefs<T>& out);

 private:
  kernels::ConvShape shape_{};
  Param<T> weight_;
  Param<T> bias_;
};

template <typename T>
Tensor<T> relu(Tensor<T> x);
/// gy masked by (y > 0); y is the ReLU output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, Tensor<T> gy);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts);
/// Splits gy back into pieces with the given channel counts.
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& gy, const std::vector<int>& channels);

template <typename T>
Tensor<T> mirror_horizontal(const Tensor<T>& x);

template <typename T>
void zero_grad(const ParamRefs<T>& params);

template <typename T>
std::size_t count_parameters(const ParamRefs<T>& params);

/// FNV-1a over names, shapes and raw value bytes; bit-exact identity check.
template <typename T>
std::uint64_t digest(const ParamRefs<T>& params);

/// Mini-batch SGD with classical momentum and optional L2 decay.
struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

template <typename T>
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}
  /// Applies accumulated gradients scaled by grad_scale, then zeroes them.
  /// With learning rate 0 the values are left bit-identical.
  void step(const ParamRefs<T>& params, double grad_scale = 1.0, double lr_scale = 1.0) const;
  const SgdConfig& config() const { return cfg_; }

 private:
  SgdConfig cfg_;
};

/// Epoch/batch/optimiser knobs shared by every training stage.
struct Schedule {
  int epochs = 1;
  int batch_size = 1;
  SgdConfig sgd;
  double flip_probability = 0.5;
};

/// Polynomial decay factor (1 - step/total)^power for step in [0, total).
double poly_lr_scale(std::size_t step, std::size_t total, double power = 0.9);

/// Per-epoch mean training loss.
using LossCurve = std::vector<double>;

/// Writes "epoch,mean_loss" rows.
std::string loss_curve_csv(const LossCurve& curve);

inline constexpr int kIgnoreTarget = -1;

/// Mean softmax cross-entropy over the cells of a C x h x w score map;
/// targets holds one class index per cell (row-major); kIgnoreTarget cells
/// are skipped and the mean runs over the rest (0 when none remain). When
/// grad is non-null it receives dL/dscores.
template <typename T>
double softmax_cross_entropy(const Tensor<T>& scores, const std::vector<int>& targets,
                             Tensor<T>* grad);

/// Maps [0,1] images onto [-1,1] before the first convolution.
template <typename T>
Tensor<T> normalize_image(const Tensor<float>& image);

}  // namespace fewshot::nn

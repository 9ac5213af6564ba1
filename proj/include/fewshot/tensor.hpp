#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace fewshot {

/// Dense channel-major (C, H, W) tensor. Every image, feature map and score
/// map in the library is one of these; batches are plain std::vectors.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : channels_(channels),
        height_(height),
        width_(width),
        data_(static_cast<std::size_t>(channels) * height * width, fill) {}

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t plane() const { return static_cast<std::size_t>(height_) * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  bool same_shape(const Tensor& o) const {
    return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
  }

  T& at(int c, int y, int x) {
    assert(c >= 0 && c < channels_ && y >= 0 && y < height_ && x >= 0 && x < width_);
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }
  const T& at(int c, int y, int x) const {
    assert(c >= 0 && c < channels_ && y >= 0 && y < height_ && x >= 0 && x < width_);
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* channel(int c) { return data_.data() + c * plane(); }
  const T* channel(int c) const { return data_.data() + c * plane(); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    assert(same_shape(o));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool all_finite() const {
    for (const auto& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(channels_, height_, width_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

std::string shape_string(int c, int h, int w);

template <typename T>
std::string shape_of(const Tensor<T>& t) {
  return shape_string(t.channels(), t.height(), t.width());
}

}  // namespace fewshot

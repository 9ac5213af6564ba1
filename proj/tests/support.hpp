#pragma once

// Shared fixtures for the unit tests.

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "fewshot/data.hpp"
#include "fewshot/errors.hpp"
#include "fewshot/rng.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot::testing {

template <typename T>
Tensor<T> random_tensor(int c, int h, int w, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(c, h, w);
  for (auto& v : t.values()) v = static_cast<T>(uniform(rng, lo, hi));
  return t;
}

inline BinaryMask random_mask(int h, int w, Rng& rng, double p = 0.5) {
  BinaryMask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.set(y, x, uniform01(rng) < p);
  return m;
}

inline BinaryMask mask_from(int h, int w, std::initializer_list<std::pair<int, int>> cells) {
  BinaryMask m(h, w);
  for (auto [y, x] : cells) m.set(y, x, true);
  return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("fewshot-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// A small synthetic benchmark that renders in well under a second.
inline SyntheticConfig tiny_synthetic(int per_group = 12) {
  SyntheticConfig c;
  c.name = "tiny";
  c.image_size = 32;
  c.train_per_group = per_group;
  c.test_per_group = per_group / 2;
  return c;
}

/// Sample with hand-written labels and a constant grey image.
inline SemanticSample labelled_sample(const std::string& id, int h, int w,
                                      std::initializer_list<std::tuple<int, int, int>> labels) {
  SemanticSample s{id, Image(3, h, w, 0.5f), LabelMap(1, h, w)};
  for (auto [y, x, c] : labels) s.labels.at(0, y, x) = static_cast<std::uint8_t>(c);
  return s;
}

/// Wraps hand-built samples into a dataset; every sample gets the given split.
inline Dataset make_dataset(std::vector<SemanticSample> samples, int num_categories,
                            const std::string& split = "test") {
  DatasetManifest m;
  m.name = "handmade";
  m.image_size = samples.empty() ? 0 : samples.front().height();
  for (CategoryId id = 1; id <= num_categories; ++id) m.categories.push_back({id, "c" + std::to_string(id)});
  for (const auto& s : samples) {
    SampleRecord r;
    r.id = s.id;
    r.split = split;
    r.group = 1;
    r.image_file = "images/" + s.id + ".ppm";
    r.label_file = "labels/" + s.id + ".pgm";
    r.categories = present_categories(s.labels);
    m.samples.push_back(r);
  }
  return Dataset(std::move(m), std::move(samples));
}

}  // namespace fewshot::testing

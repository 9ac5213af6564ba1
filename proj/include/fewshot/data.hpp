#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fewshot/rng.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

using CategoryId = int;
inline constexpr CategoryId kBackground = 0;

/// RGB image, 3 x H x W, values in [0,1].
using Image = Tensor<float>;
/// Per-pixel category ids, 1 x H x W, 0 = background.
using LabelMap = Tensor<std::uint8_t>;

struct SemanticSample {
  std::string id;
  Image image;
  LabelMap labels;

  int height() const { return labels.height(); }
  int width() const { return labels.width(); }
};

/// H x W mask whose values are exactly 0 or 1.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width) : bits_(1, height, width) {}
  /// Validates that every value is 0 or 1.
  static BinaryMask from_tensor(Tensor<std::uint8_t> bits);

  int height() const { return bits_.height(); }
  int width() const { return bits_.width(); }
  bool get(int y, int x) const { return bits_.at(0, y, x) != 0; }
  void set(int y, int x, bool v) { bits_.at(0, y, x) = v ? 1 : 0; }
  std::size_t count() const;
  const Tensor<std::uint8_t>& bits() const { return bits_; }
  /// Nearest-neighbour resize onto another grid.
  BinaryMask resized(int height, int width) const;
  template <typename T>
  Tensor<T> as_tensor() const {
    return bits_.cast<T>();
  }

  friend bool operator==(const BinaryMask& a, const BinaryMask& b) { return a.bits_ == b.bits_; }

 private:
  Tensor<std::uint8_t> bits_;
};

struct SupportPair {
  SemanticSample sample;
  BinaryMask mask;
};

struct Episode {
  SemanticSample query;
  std::vector<SupportPair> supports;
  CategoryId target_category = kBackground;

  int shots() const { return static_cast<int>(supports.size()); }
  BinaryMask query_mask() const;
};

struct FoldSplit {
  int fold_index = 0;
  std::set<CategoryId> train_categories;
  std::set<CategoryId> test_categories;
};

// ---- fold rules ------------------------------------------------------------

/// PASCAL-5^i: ids 1..20 in the conventional order, fold f (1..4) tests
/// {5f-4, ..., 5f}.
FoldSplit pascal_fold_split(int fold_index);
const std::vector<std::string>& pascal_category_names();

/// COCO-20^i: fold i (0..3) tests {4j - 3 + i : j = 1..20} out of 1..80.
FoldSplit coco_fold_split(int fold_index);

/// Contiguous blocks: num_categories split into four equal folds, fold f
/// (1..4) tests the f-th block. Used by the synthetic benchmark.
FoldSplit block_fold_split(int num_categories, int fold_index);

/// Which block (1..4) a category belongs to under block_fold_split.
int category_block(int num_categories, CategoryId id);

// ---- per-sample operations -------------------------------------------------

/// 1 where the label is any non-background category.
BinaryMask derive_objectness_labels(const SemanticSample& sample);

/// Indicator of a single category.
BinaryMask category_mask(const SemanticSample& sample, CategoryId category);

std::map<CategoryId, std::size_t> category_pixel_counts(const LabelMap& labels);
std::vector<CategoryId> present_categories(const LabelMap& labels);

SemanticSample flip_horizontal(const SemanticSample& sample);
/// Mirrors image and labels together with probability p.
SemanticSample horizontal_flip(const SemanticSample& sample, Rng& rng, double p);

// ---- datasets --------------------------------------------------------------

struct Category {
  CategoryId id = 0;
  std::string name;
};

struct SampleRecord {
  std::string id;
  std::string split;  // "train" or "test"
  int group = 0;      // category block the sample was drawn from
  std::string image_file;
  std::string label_file;
  std::vector<CategoryId> categories;
};

struct DatasetManifest {
  static constexpr int kFormatVersion = 1;
  std::string name;
  std::optional<std::uint64_t> seed;
  int image_size = 0;
  std::vector<Category> categories;
  std::vector<SampleRecord> samples;
  nlohmann::json generator;  // generation parameters, informational

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

/// In-memory dataset: manifest plus decoded samples in manifest order.
class Dataset {
 public:
  Dataset() = default;
  Dataset(DatasetManifest manifest, std::vector<SemanticSample> samples);

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t size() const { return samples_.size(); }
  const SemanticSample& sample(std::size_t i) const { return samples_.at(i); }
  const SampleRecord& record(std::size_t i) const { return manifest_.samples.at(i); }
  int num_categories() const { return static_cast<int>(manifest_.categories.size()); }
  std::set<CategoryId> category_universe() const;

  /// Indices of samples in a split whose categories avoid `excluded`.
  std::vector<std::size_t> select(const std::string& split,
                                  const std::set<CategoryId>& excluded = {}) const;
  /// Indices of samples in a split drawn from one category block.
  std::vector<std::size_t> select_group(const std::string& split, int group) const;

  /// Training pool for a fold: train-split samples containing no test category.
  std::vector<std::size_t> train_pool(const FoldSplit& fold) const;
  /// Evaluation pool for a fold: every test-split sample. Episodes keep only
  /// those containing the target category.
  std::vector<std::size_t> test_pool(const FoldSplit& fold) const;

 private:
  DatasetManifest manifest_;
  std::vector<SemanticSample> samples_;
};

/// Writes manifest.json, images/<id>.ppm and labels/<id>.pgm under root.
void write_dataset(const Dataset& dataset, const std::filesystem::path& root);
/// Reads and validates a dataset written by write_dataset.
Dataset load_dataset(const std::filesystem::path& root);
/// Digest over the manifest text and every stored file.
std::uint64_t dataset_digest(const std::filesystem::path& root);

// ---- synthetic benchmark ---------------------------------------------------

struct SyntheticConfig {
  std::string name = "synthetic-shapes";
  int image_size = 64;
  int num_categories = 12;  // four blocks of three
  int train_per_group = 120;
  int test_per_group = 60;
  int clutter = 3;  // maximum number of non-object patches per image
  int max_instances = 3;

  nlohmann::json to_json() const;
  static SyntheticConfig from_json(const nlohmann::json& j);
};

const std::vector<std::string>& shape_family_names();

/// Bumped whenever rendering changes, so cached datasets are not reused.
inline constexpr int kSyntheticRendererVersion = 2;

/// Renders the whole dataset in memory. Each sample is generated from its own
/// sub-seed derived from (seed, index), so the result is independent of the
/// thread count.
Dataset generate_synthetic_dataset(const SyntheticConfig& config, std::uint64_t seed);

/// Renders one image from a block's categories.
SemanticSample render_synthetic_sample(const SyntheticConfig& config, const std::string& id,
                                       const std::vector<CategoryId>& allowed, Rng& rng);

// ---- episodes --------------------------------------------------------------

inline constexpr int kMinTargetPixels = 16;

/// A sample can host a category when the category covers at least
/// min_target_pixels pixels and, if a grid is set, its mask keeps at least
/// one cell after nearest-neighbour resizing to that grid in both horizontal
/// orientations.
struct Eligibility {
  int min_target_pixels = kMinTargetPixels;
  int grid_height = 0;  // 0: no grid check
  int grid_width = 0;
};

/// Dataset indices of one sampled episode.
struct EpisodeDraw {
  CategoryId category = kBackground;
  std::size_t query = 0;
  std::vector<std::size_t> supports;
};

/// Draws episodes from a fixed set of candidate samples. Eligibility is
/// computed once.
class EpisodeSampler {
 public:
  EpisodeSampler(const Dataset& dataset, std::vector<std::size_t> candidates,
                 std::set<CategoryId> category_pool, Eligibility rule = {});

  /// Category uniform over those with at least K+1 eligible samples, then
  /// query and supports without replacement.
  Episode sample(int shots, Rng& rng) const;
  /// Same draw as sample() without copying the images.
  EpisodeDraw draw(int shots, Rng& rng) const;
  Episode materialize(const EpisodeDraw& draw) const;

  /// Categories that can host a K-shot episode.
  std::vector<CategoryId> eligible_categories(int shots) const;
  const std::vector<std::size_t>& eligible_samples(CategoryId category) const;

 private:
  const Dataset* dataset_;
  std::set<CategoryId> pool_;
  std::map<CategoryId, std::vector<std::size_t>> eligible_;
};

bool survives_grid(const BinaryMask& mask, int grid_height, int grid_width);

Episode sample_episode(const Dataset& dataset, const std::vector<std::size_t>& candidates,
                       const std::set<CategoryId>& category_pool, int shots, Rng& rng);

/// Yields samples for class-agnostic training and throws AuditError naming
/// any sample that contains a held-out category.
class ClassAgnosticFeed {
 public:
  ClassAgnosticFeed(const Dataset& dataset, std::vector<std::size_t> indices,
                    std::set<CategoryId> held_out);
  std::size_t size() const { return indices_.size(); }
  const SemanticSample& at(std::size_t i) const;
  const std::vector<std::size_t>& indices() const { return indices_; }

 private:
  const Dataset* dataset_;
  std::vector<std::size_t> indices_;
  std::set<CategoryId> held_out_;
};

std::string format_categories(const std::set<CategoryId>& ids);

}  // namespace fewshot

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fewshot/data.hpp"

namespace fewshot {

/// Pixel confusion counts of a binary prediction against ground truth.
struct Confusion {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t fg_intersection() const { return tp; }
  std::uint64_t fg_union() const { return tp + fp + fn; }
  std::uint64_t bg_intersection() const { return tn; }
  std::uint64_t bg_union() const { return tn + fp + fn; }
  /// IoU of the positive class; 1.0 when both masks are empty.
  double fg_iou() const;
  double bg_iou() const;

  Confusion& operator+=(const Confusion& o);
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

Confusion confusion(const BinaryMask& pred, const BinaryMask& gt);

/// |pred AND gt| / |pred OR gt|, defined as 1.0 when both are empty.
double binary_iou(const BinaryMask& pred, const BinaryMask& gt);

struct EpisodeResult {
  CategoryId category = kBackground;
  Confusion counts;
};

struct MiouResult {
  std::map<CategoryId, double> per_category;
  double miou = 0.0;
};

/// Per-category IoU from intersections and unions summed over that
/// category's episodes; mIoU is the unweighted mean over test_categories.
MiouResult compute_miou(std::span<const EpisodeResult> episodes, const std::set<CategoryId>& test_categories);

enum class FbIouMode {
  per_episode,  // mean of per-episode FG and BG IoU (default)
  dataset,      // FG and BG IoU from counts summed over all episodes
};

double compute_fbiou(std::span<const EpisodeResult> episodes, FbIouMode mode = FbIouMode::per_episode);

/// Mergeable collection of episode results. Metric values do not depend on
/// insertion order or on how the stream was chunked.
class MetricsAccumulator {
 public:
  void add(const EpisodeResult& r) { results_.push_back(r); }
  void merge(const MetricsAccumulator& other);
  std::span<const EpisodeResult> results() const { return results_; }
  std::size_t size() const { return results_.size(); }

 private:
  std::vector<EpisodeResult> results_;
};

struct FoldMetrics {
  int fold = 0;
  std::size_t episodes = 0;
  std::map<CategoryId, double> category_iou;
  double miou = 0.0;
  double fbiou = 0.0;          // per-episode convention
  double fbiou_dataset = 0.0;  // dataset-level convention, reported alongside

  static FoldMetrics from_results(int fold, std::span<const EpisodeResult> results,
                                  const std::set<CategoryId>& test_categories);
};

struct MetricsReport {
  static constexpr int kSchemaVersion = 1;
  std::string label;
  std::string fingerprint;
  std::uint64_t seed = 0;
  int shots = 1;
  std::vector<FoldMetrics> folds;

  double mean_miou() const;
  double mean_fbiou() const;
  std::size_t episode_count() const;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  /// Canonical serialisation; byte-identical for identical reports.
  std::string to_text() const;
};

/// Metric conventions stated in every report.
const std::vector<std::string>& metric_conventions();

/// Aligned table, one row per report: one column per fold, Mean (mIoU), FB-IoU.
/// Values are percentages with one decimal.
std::string render_table(const std::vector<MetricsReport>& rows, const std::string& title = "");

}  // namespace fewshot

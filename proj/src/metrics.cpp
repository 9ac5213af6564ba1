#include "fewshot/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "fewshot/errors.hpp"

namespace fewshot {

namespace {
double ratio_or_one(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

// Order-independent sum: sort first so merged or shuffled streams agree bit for bit.
double stable_sum(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return std::accumulate(values.begin(), values.end(), 0.0);
}
}  // namespace

double Confusion::fg_iou() const { return ratio_or_one(fg_intersection(), fg_union()); }
double Confusion::bg_iou() const { return ratio_or_one(bg_intersection(), bg_union()); }

Confusion& Confusion::operator+=(const Confusion& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

Confusion confusion(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height() != gt.height() || pred.width() != gt.width())
    throw ArgumentError("confusion: prediction " + std::to_string(pred.height()) + "x" +
                        std::to_string(pred.width()) + " vs ground truth " +
                        std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
  Confusion c;
  const auto p = pred.bits().values();
  const auto g = gt.bits().values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] && g[i])
      ++c.tp;
    else if (p[i])
      ++c.fp;
    else if (g[i])
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double binary_iou(const BinaryMask& pred, const BinaryMask& gt) { return confusion(pred, gt).fg_iou(); }

MiouResult compute_miou(std::span<const EpisodeResult> episodes, const std::set<CategoryId>& test_categories) {
  if (test_categories.empty()) throw ArgumentError("compute_miou: no test categories");
  std::map<CategoryId, std::pair<std::uint64_t, std::uint64_t>> sums;
  std::map<CategoryId, std::size_t> counts;
  for (const auto& e : episodes) {
    auto& s = sums[e.category];
    s.first += e.counts.fg_intersection();
    s.second += e.counts.fg_union();
    ++counts[e.category];
  }
  MiouResult r;
  double total = 0.0;
  for (CategoryId c : test_categories) {
    if (counts[c] == 0)
      throw ProtocolError("compute_miou: test category " + std::to_string(c) + " has no episodes");
    r.per_category[c] = ratio_or_one(sums[c].first, sums[c].second);
    total += r.per_category[c];
  }
  r.miou = total / static_cast<double>(test_categories.size());
  return r;
}

double compute_fbiou(std::span<const EpisodeResult> episodes, FbIouMode mode) {
  if (episodes.empty()) throw ArgumentError("compute_fbiou: no episodes");
  if (mode == FbIouMode::dataset) {
    Confusion total;
    for (const auto& e : episodes) total += e.counts;
    return 0.5 * (total.fg_iou() + total.bg_iou());
  }
  std::vector<double> fg, bg;
  fg.reserve(episodes.size());
  bg.reserve(episodes.size());
  for (const auto& e : episodes) {
    fg.push_back(e.counts.fg_iou());
    bg.push_back(e.counts.bg_iou());
  }
  const double n = static_cast<double>(episodes.size());
  return 0.5 * (stable_sum(std::move(fg)) / n + stable_sum(std::move(bg)) / n);
}

void MetricsAccumulator::merge(const MetricsAccumulator& other) {
  results_.insert(results_.end(), other.results_.begin(), other.results_.end());
}

FoldMetrics FoldMetrics::from_results(int fold, std::span<const EpisodeResult> results,
                                      const std::set<CategoryId>& test_categories) {
  FoldMetrics m;
  m.fold = fold;
  m.episodes = results.size();
  auto miou = compute_miou(results, test_categories);
  m.category_iou = std::move(miou.per_category);
  m.miou = miou.miou;
  m.fbiou = compute_fbiou(results, FbIouMode::per_episode);
  m.fbiou_dataset = compute_fbiou(results, FbIouMode::dataset);
  return m;
}

double MetricsReport::mean_miou() const {
  if (folds.empty()) return 0.0;
  double s = 0.0;
  for (const auto& f : folds) s += f.miou;
  return s / static_cast<double>(folds.size());
}

double MetricsReport::mean_fbiou() const {
  if (folds.empty()) return 0.0;
  double s = 0.0;
  for (const auto& f : folds) s += f.fbiou;
  return s / static_cast<double>(folds.size());
}

std::size_t MetricsReport::episode_count() const {
  std::size_t n = 0;
  for (const auto& f : folds) n += f.episodes;
  return n;
}

const std::vector<std::string>& metric_conventions() {
  static const std::vector<std::string> c = {
      "binary IoU of two empty masks is 1.0",
      "per-category IoU accumulates intersections and unions over the category's episodes",
      "mIoU is the unweighted mean of the fold's test-category IoUs",
      "FB-IoU averages per-episode foreground and background IoU (dataset-level value also reported)",
      "prediction threshold 0.5, ties count as foreground"};
  return c;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["label"] = label;
  j["fingerprint"] = fingerprint;
  j["seed"] = seed;
  j["shots"] = shots;
  j["conventions"] = metric_conventions();
  j["episodes"] = episode_count();
  auto& fs = j["folds"] = nlohmann::json::array();
  for (const auto& f : folds) {
    nlohmann::json cats = nlohmann::json::object();
    for (const auto& [c, v] : f.category_iou) cats[std::to_string(c)] = v;
    fs.push_back({{"fold", f.fold},
                  {"episodes", f.episodes},
                  {"category_iou", cats},
                  {"miou", f.miou},
                  {"fbiou", f.fbiou},
                  {"fbiou_dataset", f.fbiou_dataset}});
  }
  j["mean_miou"] = mean_miou();
  j["mean_fbiou"] = mean_fbiou();
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  try {
    MetricsReport r;
    r.label = j.at("label").get<std::string>();
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.shots = j.at("shots").get<int>();
    for (const auto& f : j.at("folds")) {
      FoldMetrics m;
      m.fold = f.at("fold").get<int>();
      m.episodes = f.at("episodes").get<std::size_t>();
      for (const auto& [k, v] : f.at("category_iou").items()) m.category_iou[std::stoi(k)] = v.get<double>();
      m.miou = f.at("miou").get<double>();
      m.fbiou = f.at("fbiou").get<double>();
      m.fbiou_dataset = f.at("fbiou_dataset").get<double>();
      r.folds.push_back(std::move(m));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed metrics report: ") + e.what());
  }
}

std::string MetricsReport::to_text() const { return to_json().dump(2) + "\n"; }

std::string render_table(const std::vector<MetricsReport>& rows, const std::string& title) {
  std::set<int> fold_ids;
  for (const auto& r : rows)
    for (const auto& f : r.folds) fold_ids.insert(f.fold);
  std::size_t label_width = 6;
  for (const auto& r : rows) label_width = std::max(label_width, r.label.size());
  const int lw = static_cast<int>(label_width);
  char buf[256];
  std::string out;
  if (!title.empty()) out += title + "\n";
  std::snprintf(buf, sizeof buf, "%-*s |", lw, "Method");
  out += buf;
  for (int f : fold_ids) {
    std::snprintf(buf, sizeof buf, " %7s", ("Fold-" + std::to_string(f)).c_str());
    out += buf;
  }
  out += "    Mean |  FB-IoU\n";
  out += std::string(label_width, '-') + "-+-" + std::string(8 * fold_ids.size() + 7, '-') + "-+-" +
         std::string(7, '-') + "\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s |", lw, r.label.c_str());
    out += buf;
    for (int fold : fold_ids) {
      const auto it = std::find_if(r.folds.begin(), r.folds.end(), [&](const FoldMetrics& f) { return f.fold == fold; });
      if (it == r.folds.end()) {
        out += "       -";
      } else {
        std::snprintf(buf, sizeof buf, " %7.1f", 100.0 * it->miou);
        out += buf;
      }
    }
    std::snprintf(buf, sizeof buf, " %7.1f | %7.1f\n", 100.0 * r.mean_miou(), 100.0 * r.mean_fbiou());
    out += buf;
  }
  return out;
}

}  // namespace fewshot

#include "fewshot/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "fewshot/errors.hpp"
#include "fewshot/image_io.hpp"
#include "fewshot/kernels.hpp"
#include "fewshot/nn.hpp"

namespace fewshot {

// ---- masks -------------------------------------------------------------------

BinaryMask BinaryMask::from_tensor(Tensor<std::uint8_t> bits) {
  if (bits.channels() != 1) throw ArgumentError("BinaryMask: expected a single channel");
  for (auto v : bits.values())
    if (v > 1) throw ValidationError("BinaryMask: value " + std::to_string(v) + " is not 0 or 1");
  BinaryMask m;
  m.bits_ = std::move(bits);
  return m;
}

std::size_t BinaryMask::count() const {
  std::size_t n = 0;
  for (auto v : bits_.values()) n += v;
  return n;
}

BinaryMask BinaryMask::resized(int height, int width) const {
  BinaryMask m;
  m.bits_ = kernels::resize_nearest(bits_, height, width);
  return m;
}

BinaryMask Episode::query_mask() const { return category_mask(query, target_category); }

// ---- folds -------------------------------------------------------------------

const std::vector<std::string>& pascal_category_names() {
  static const std::vector<std::string> names = {
      "aeroplane", "bicycle",     "bird",  "boat",  "bottle", "bus",         "car",
      "cat",       "chair",       "cow",   "dining table", "dog", "horse",   "motorbike",
      "person",    "potted plant", "sheep", "sofa",  "train",  "tv/monitor"};
  return names;
}

FoldSplit block_fold_split(int num_categories, int fold_index) {
  if (num_categories <= 0 || num_categories % 4 != 0)
    throw ArgumentError("block_fold_split: category count " + std::to_string(num_categories) +
                        " is not a positive multiple of 4");
  if (fold_index < 1 || fold_index > 4)
    throw ArgumentError("fold index " + std::to_string(fold_index) + " outside 1..4");
  const int per_fold = num_categories / 4;
  FoldSplit split;
  split.fold_index = fold_index;
  for (int id = 1; id <= num_categories; ++id) {
    if (id > (fold_index - 1) * per_fold && id <= fold_index * per_fold)
      split.test_categories.insert(id);
    else
      split.train_categories.insert(id);
  }
  return split;
}

int category_block(int num_categories, CategoryId id) {
  const int per_fold = num_categories / 4;
  return (id - 1) / per_fold + 1;
}

FoldSplit pascal_fold_split(int fold_index) { return block_fold_split(20, fold_index); }

FoldSplit coco_fold_split(int fold_index) {
  if (fold_index < 0 || fold_index > 3)
    throw ArgumentError("COCO fold index " + std::to_string(fold_index) + " outside 0..3");
  FoldSplit split;
  split.fold_index = fold_index;
  for (int j = 1; j <= 20; ++j) split.test_categories.insert(4 * j - 3 + fold_index);
  for (int id = 1; id <= 80; ++id)
    if (!split.test_categories.contains(id)) split.train_categories.insert(id);
  return split;
}

// ---- per-sample ops ----------------------------------------------------------

BinaryMask derive_objectness_labels(const SemanticSample& sample) {
  BinaryMask m(sample.height(), sample.width());
  for (int y = 0; y < sample.height(); ++y)
    for (int x = 0; x < sample.width(); ++x) m.set(y, x, sample.labels.at(0, y, x) != kBackground);
  return m;
}

BinaryMask category_mask(const SemanticSample& sample, CategoryId category) {
  BinaryMask m(sample.height(), sample.width());
  for (int y = 0; y < sample.height(); ++y)
    for (int x = 0; x < sample.width(); ++x) m.set(y, x, sample.labels.at(0, y, x) == category);
  return m;
}

std::map<CategoryId, std::size_t> category_pixel_counts(const LabelMap& labels) {
  std::map<CategoryId, std::size_t> counts;
  for (auto v : labels.values())
    if (v != kBackground) ++counts[v];
  return counts;
}

std::vector<CategoryId> present_categories(const LabelMap& labels) {
  std::vector<CategoryId> ids;
  for (const auto& [id, n] : category_pixel_counts(labels)) ids.push_back(id);
  return ids;
}

SemanticSample flip_horizontal(const SemanticSample& sample) {
  return {sample.id, nn::mirror_horizontal(sample.image), nn::mirror_horizontal(sample.labels)};
}

SemanticSample horizontal_flip(const SemanticSample& sample, Rng& rng, double p) {
  if (uniform01(rng) < p) return flip_horizontal(sample);
  return sample;
}

std::string format_categories(const std::set<CategoryId>& ids) {
  std::string s = "{";
  for (auto it = ids.begin(); it != ids.end(); ++it) {
    if (it != ids.begin()) s += ",";
    s += std::to_string(*it);
  }
  return s + "}";
}

// ---- manifest ----------------------------------------------------------------

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["name"] = name;
  j["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json(nullptr);
  j["image_size"] = image_size;
  j["generator"] = generator;
  auto& cats = j["categories"] = nlohmann::json::array();
  for (const auto& c : categories) cats.push_back({{"id", c.id}, {"name", c.name}});
  auto& recs = j["samples"] = nlohmann::json::array();
  for (const auto& s : samples)
    recs.push_back({{"id", s.id},
                    {"split", s.split},
                    {"group", s.group},
                    {"image", s.image_file},
                    {"labels", s.label_file},
                    {"categories", s.categories}});
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kFormatVersion)
      throw ValidationError("unsupported manifest format version");
    DatasetManifest m;
    m.name = j.at("name").get<std::string>();
    if (!j.at("seed").is_null()) m.seed = j.at("seed").get<std::uint64_t>();
    m.image_size = j.at("image_size").get<int>();
    m.generator = j.value("generator", nlohmann::json::object());
    for (const auto& c : j.at("categories"))
      m.categories.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
    for (const auto& s : j.at("samples"))
      m.samples.push_back({s.at("id").get<std::string>(), s.at("split").get<std::string>(),
                           s.at("group").get<int>(), s.at("image").get<std::string>(),
                           s.at("labels").get<std::string>(),
                           s.at("categories").get<std::vector<int>>()});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
}

// ---- dataset -----------------------------------------------------------------

Dataset::Dataset(DatasetManifest manifest, std::vector<SemanticSample> samples)
    : manifest_(std::move(manifest)), samples_(std::move(samples)) {
  if (manifest_.samples.size() != samples_.size())
    throw ValidationError("dataset: manifest lists " + std::to_string(manifest_.samples.size()) +
                          " samples, got " + std::to_string(samples_.size()));
}

std::set<CategoryId> Dataset::category_universe() const {
  std::set<CategoryId> ids;
  for (const auto& c : manifest_.categories) ids.insert(c.id);
  return ids;
}

std::vector<std::size_t> Dataset::select(const std::string& split,
                                         const std::set<CategoryId>& excluded) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest_.samples.size(); ++i) {
    const auto& r = manifest_.samples[i];
    if (r.split != split) continue;
    if (std::any_of(r.categories.begin(), r.categories.end(),
                    [&](CategoryId c) { return excluded.contains(c); }))
      continue;
    out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Dataset::select_group(const std::string& split, int group) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest_.samples.size(); ++i)
    if (manifest_.samples[i].split == split && manifest_.samples[i].group == group) out.push_back(i);
  return out;
}

std::vector<std::size_t> Dataset::train_pool(const FoldSplit& fold) const {
  return select("train", fold.test_categories);
}

std::vector<std::size_t> Dataset::test_pool(const FoldSplit& /*fold*/) const {
  return select("test");
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "labels", ec);
  if (ec) throw IoError("cannot create dataset directory " + root.string() + ": " + ec.message());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& rec = dataset.record(i);
    const auto& s = dataset.sample(i);
    io::write_ppm(root / rec.image_file, io::to_bytes(s.image));
    io::write_pgm(root / rec.label_file, s.labels);
  }
  std::ofstream out(root / "manifest.json");
  if (!out) throw IoError("cannot write manifest under " + root.string());
  out << dataset.manifest().to_json().dump(1) << "\n";
  if (!out) throw IoError("manifest write failed under " + root.string());
}

Dataset load_dataset(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw IoError("no manifest.json under " + root.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest.json is not valid JSON: " + std::string(e.what()));
  }
  DatasetManifest manifest = DatasetManifest::from_json(j);
  std::set<CategoryId> universe;
  for (const auto& c : manifest.categories) universe.insert(c.id);

  std::vector<SemanticSample> samples;
  std::vector<std::string> offending;
  for (const auto& rec : manifest.samples) {
    SemanticSample s;
    s.id = rec.id;
    try {
      const auto rgb = io::read_netpbm(root / rec.image_file);
      s.labels = io::read_netpbm(root / rec.label_file);
      s.image = io::from_bytes(rgb);
      bool ok = rgb.channels() == 3 && s.labels.channels() == 1 &&
                rgb.height() == manifest.image_size && rgb.width() == manifest.image_size &&
                s.labels.height() == rgb.height() && s.labels.width() == rgb.width();
      if (ok) {
        const auto present = present_categories(s.labels);
        ok = present == rec.categories &&
             std::all_of(present.begin(), present.end(),
                         [&](CategoryId c) { return universe.contains(c); });
      }
      if (!ok) offending.push_back(rec.id);
    } catch (const std::exception&) {
      offending.push_back(rec.id);
    }
    samples.push_back(std::move(s));
  }
  if (!offending.empty()) {
    std::string list;
    for (std::size_t i = 0; i < offending.size(); ++i) list += (i ? ", " : "") + offending[i];
    throw ValidationError("dataset " + root.string() + " does not match its manifest; offending samples: " + list);
  }
  return Dataset(std::move(manifest), std::move(samples));
}

std::uint64_t dataset_digest(const std::filesystem::path& root) {
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string manifest_text = slurp(root / "manifest.json");
  std::uint64_t h = fnv1a64(manifest_text);
  const auto manifest = DatasetManifest::from_json(nlohmann::json::parse(manifest_text));
  for (const auto& rec : manifest.samples) {
    h = fnv1a64(slurp(root / rec.image_file), h);
    h = fnv1a64(slurp(root / rec.label_file), h);
  }
  return h;
}

// ---- episodes ----------------------------------------------------------------

bool survives_grid(const BinaryMask& mask, int grid_height, int grid_width) {
  if (mask.resized(grid_height, grid_width).count() == 0) return false;
  BinaryMask mirrored(mask.height(), mask.width());
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) mirrored.set(y, mask.width() - 1 - x, mask.get(y, x));
  return mirrored.resized(grid_height, grid_width).count() > 0;
}

EpisodeSampler::EpisodeSampler(const Dataset& dataset, std::vector<std::size_t> candidates,
                               std::set<CategoryId> category_pool, Eligibility rule)
    : dataset_(&dataset), pool_(std::move(category_pool)) {
  if (pool_.empty()) throw ArgumentError("episode sampler: empty category pool");
  if ((rule.grid_height > 0) != (rule.grid_width > 0) || rule.grid_height < 0 || rule.grid_width < 0)
    throw ArgumentError("episode sampler: grid needs both dimensions");
  for (CategoryId c : pool_) eligible_[c];
  for (std::size_t idx : candidates) {
    const auto& s = dataset.sample(idx);
    for (const auto& [c, n] : category_pixel_counts(s.labels)) {
      if (!pool_.contains(c) || n < static_cast<std::size_t>(rule.min_target_pixels)) continue;
      if (rule.grid_height > 0 && !survives_grid(category_mask(s, c), rule.grid_height, rule.grid_width)) continue;
      eligible_[c].push_back(idx);
    }
  }
}

std::vector<CategoryId> EpisodeSampler::eligible_categories(int shots) const {
  std::vector<CategoryId> out;
  for (const auto& [c, list] : eligible_)
    if (list.size() >= static_cast<std::size_t>(shots) + 1) out.push_back(c);
  return out;
}

const std::vector<std::size_t>& EpisodeSampler::eligible_samples(CategoryId category) const {
  return eligible_.at(category);
}

EpisodeDraw EpisodeSampler::draw(int shots, Rng& rng) const {
  if (shots < 1) throw ArgumentError("episode sampler: K must be at least 1");
  const auto cats = eligible_categories(shots);
  if (cats.empty())
    throw SamplingError("no category in pool " + format_categories(pool_) + " has " +
                        std::to_string(shots + 1) + " eligible samples");
  EpisodeDraw d;
  d.category = cats[uniform_index(rng, cats.size())];
  std::vector<std::size_t> pick = eligible_.at(d.category);
  for (int i = 0; i <= shots; ++i) {
    const std::size_t j = i + uniform_index(rng, pick.size() - i);
    std::swap(pick[i], pick[j]);
  }
  d.query = pick[0];
  d.supports.assign(pick.begin() + 1, pick.begin() + 1 + shots);
  return d;
}

Episode EpisodeSampler::materialize(const EpisodeDraw& d) const {
  Episode ep;
  ep.target_category = d.category;
  ep.query = dataset_->sample(d.query);
  for (std::size_t i : d.supports) {
    const auto& s = dataset_->sample(i);
    ep.supports.push_back({s, category_mask(s, d.category)});
  }
  return ep;
}

Episode EpisodeSampler::sample(int shots, Rng& rng) const { return materialize(draw(shots, rng)); }

Episode sample_episode(const Dataset& dataset, const std::vector<std::size_t>& candidates,
                       const std::set<CategoryId>& category_pool, int shots, Rng& rng) {
  return EpisodeSampler(dataset, candidates, category_pool).sample(shots, rng);
}

ClassAgnosticFeed::ClassAgnosticFeed(const Dataset& dataset, std::vector<std::size_t> indices,
                                     std::set<CategoryId> held_out)
    : dataset_(&dataset), indices_(std::move(indices)), held_out_(std::move(held_out)) {
  std::string offenders;
  for (std::size_t idx : indices_) {
    for (CategoryId c : present_categories(dataset.sample(idx).labels))
      if (held_out_.contains(c)) {
        offenders += (offenders.empty() ? "" : ", ") + dataset.sample(idx).id;
        break;
      }
  }
  if (!offenders.empty())
    throw AuditError("class-agnostic training set contains held-out categories " +
                     format_categories(held_out_) + " in samples: " + offenders);
}

const SemanticSample& ClassAgnosticFeed::at(std::size_t i) const {
  const auto& s = dataset_->sample(indices_.at(i));
  for (auto v : s.labels.values())
    if (held_out_.contains(v))
      throw AuditError("class-agnostic feed read held-out category " + std::to_string(v) +
                       " in sample " + s.id);
  return s;
}

}  // namespace fewshot

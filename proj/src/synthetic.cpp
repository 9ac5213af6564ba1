// Deterministic synthetic shapes benchmark.
//
// Category identity is carried by silhouette only: every instance gets a
// random colour and texture, so a classifier has to learn shape. Objects
// and clutter draw their fill from the same texture distribution; what
// objects share across categories is a dark outline and a compact
// silhouette, which clutter patches lack.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "fewshot/data.hpp"
#include "fewshot/errors.hpp"
#include "fewshot/image_io.hpp"

namespace fewshot {
namespace {

constexpr double kPi = std::numbers::pi;

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Silhouette membership in the shape's canonical frame (roughly [-1,1]^2).
bool inside_family(int family, double u, double v) {
  const double r = std::hypot(u, v);
  const double au = std::abs(u), av = std::abs(v);
  switch (family) {
    case 0: return r < 1.0;                                      // disk
    case 1: return r < 1.0 && r > 0.55;                          // ring
    case 2: return std::max(au, av) < 0.8;                       // square
    case 3: return au + av < 1.0;                                // diamond
    case 4: return v <= 0.5 && v >= -1.0 + std::sqrt(3.0) * au;  // triangle
    case 5: {                                                    // star
      const double theta = std::atan2(v, u);
      return r < 0.45 + 0.55 * (0.5 + 0.5 * std::cos(5.0 * theta));
    }
    case 6: return (au < 0.3 && av < 1.0) || (av < 0.3 && au < 1.0);             // cross
    case 7: return av <= 0.866 && 0.866 * au + 0.5 * av <= 0.866;               // hexagon
    case 8: return r < 1.0 && std::hypot(u - 0.5, v) > 0.8;                     // crescent
    case 9: return au < 1.0 && av < 0.35;                                       // bar
    case 10:                                                                    // L-shape
      return (u >= -0.9 && u <= -0.3 && v >= -0.9 && v <= 0.9) ||
             (u >= -0.9 && u <= 0.9 && v >= 0.3 && v <= 0.9);
    case 11: {  // checker-square
      if (std::max(au, av) >= 0.9) return false;
      const int cu = static_cast<int>(std::floor((u + 0.9) / 0.45));
      const int cv = static_cast<int>(std::floor((v + 0.9) / 0.45));
      return (cu + cv) % 2 == 0;
    }
    default: return false;
  }
}

struct Canvas {
  int size;
  std::vector<Rgb> px;
  LabelMap labels;

  explicit Canvas(int s) : size(s), px(static_cast<std::size_t>(s) * s), labels(1, s, s) {}
  Rgb& at(int y, int x) { return px[static_cast<std::size_t>(y) * size + x]; }
};

void paint_background(Canvas& cv, Rng& rng) {
  const double base = uniform(rng, 0.25, 0.75);
  const Rgb tint{base + uniform(rng, -0.08, 0.08), base + uniform(rng, -0.08, 0.08),
                 base + uniform(rng, -0.08, 0.08)};
  const double angle = uniform(rng, 0, 2 * kPi);
  const double amp = uniform(rng, 0.0, 0.15);
  for (int y = 0; y < cv.size; ++y)
    for (int x = 0; x < cv.size; ++x) {
      const double t = ((x * std::cos(angle) + y * std::sin(angle)) / cv.size - 0.5) * amp;
      const double n = normal(rng) * 0.03;
      cv.at(y, x) = {tint.r + t + n, tint.g + t + n, tint.b + t + n};
    }
}

// Flat or striped fill, drawn the same way for objects and clutter.
struct Fill {
  Rgb color;
  bool striped = false;
  double freq = 1.0, angle = 0.0, depth = 0.0;

  static Fill draw(Rng& rng) {
    Fill f;
    f.color = hsv_to_rgb(uniform01(rng), uniform(rng, 0.5, 1.0), uniform(rng, 0.55, 0.95));
    f.striped = uniform01(rng) < 0.5;
    f.freq = uniform(rng, 0.8, 1.6);
    f.angle = uniform(rng, 0, kPi);
    f.depth = uniform(rng, 0.15, 0.3);
    return f;
  }
  double shade(int y, int x) const {
    if (!striped) return 1.0;
    return 1.0 - depth + depth * std::sin(freq * (x * std::cos(angle) + y * std::sin(angle)));
  }
};

// Wobbly blob with no outline; label stays background.
void paint_clutter(Canvas& cv, Rng& rng) {
  const double s = cv.size;
  const double cx = uniform(rng, 0, s), cy = uniform(rng, 0, s);
  const double ra = uniform(rng, 0.06, 0.16) * s, rb = uniform(rng, 0.06, 0.16) * s;
  const double rot = uniform(rng, 0, 2 * kPi), phase = uniform(rng, 0, 2 * kPi);
  const Fill fill = Fill::draw(rng);
  for (int y = 0; y < cv.size; ++y)
    for (int x = 0; x < cv.size; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = (dx * std::cos(rot) + dy * std::sin(rot)) / ra;
      const double v = (-dx * std::sin(rot) + dy * std::cos(rot)) / rb;
      const double theta = std::atan2(v, u);
      if (std::hypot(u, v) >= 1.0 + 0.25 * std::sin(3 * theta + phase)) continue;
      const double k = fill.shade(y, x);
      const double n = normal(rng) * 0.04;
      cv.at(y, x) = {fill.color.r * k + n, fill.color.g * k + n, fill.color.b * k + n};
    }
}

// Outlined silhouette; writes the category id into the labels.
void paint_object(Canvas& cv, int family, CategoryId category, Rng& rng) {
  const double s = cv.size;
  const double radius = uniform(rng, 0.11, 0.2) * s;
  const double cx = uniform(rng, radius, s - radius), cy = uniform(rng, radius, s - radius);
  const double rot = uniform(rng, 0, 2 * kPi);
  const Fill fill = Fill::draw(rng);

  std::vector<std::uint8_t> in(static_cast<std::size_t>(cv.size) * cv.size, 0);
  for (int y = 0; y < cv.size; ++y)
    for (int x = 0; x < cv.size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (dx * std::cos(rot) + dy * std::sin(rot)) / radius;
      const double v = (-dx * std::sin(rot) + dy * std::cos(rot)) / radius;
      in[static_cast<std::size_t>(y) * cv.size + x] = inside_family(family, u, v);
    }
  auto inside = [&](int y, int x) {
    return y >= 0 && y < cv.size && x >= 0 && x < cv.size && in[static_cast<std::size_t>(y) * cv.size + x];
  };
  for (int y = 0; y < cv.size; ++y)
    for (int x = 0; x < cv.size; ++x) {
      if (!inside(y, x)) continue;
      const bool edge = !inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1);
      const double k = edge ? 0.35 : fill.shade(y, x);
      const double n = normal(rng) * 0.04;
      cv.at(y, x) = {fill.color.r * k + n, fill.color.g * k + n, fill.color.b * k + n};
      cv.labels.at(0, y, x) = static_cast<std::uint8_t>(category);
    }
}

std::string category_name(CategoryId id) {
  const auto& families = shape_family_names();
  const int family = (id - 1) % static_cast<int>(families.size());
  const int cycle = (id - 1) / static_cast<int>(families.size());
  return cycle == 0 ? families[family] : families[family] + "-" + std::to_string(cycle + 1);
}

}  // namespace

const std::vector<std::string>& shape_family_names() {
  static const std::vector<std::string> names = {"disk",    "ring",    "square",   "diamond",
                                                 "triangle", "star",   "cross",    "hexagon",
                                                 "crescent", "bar",    "L-shape",  "checker-square"};
  return names;
}

nlohmann::json SyntheticConfig::to_json() const {
  return {{"name", name},
          {"image_size", image_size},
          {"num_categories", num_categories},
          {"train_per_group", train_per_group},
          {"test_per_group", test_per_group},
          {"clutter", clutter},
          {"max_instances", max_instances}};
}

SyntheticConfig SyntheticConfig::from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  c.name = j.value("name", c.name);
  c.image_size = j.value("image_size", c.image_size);
  c.num_categories = j.value("num_categories", c.num_categories);
  c.train_per_group = j.value("train_per_group", c.train_per_group);
  c.test_per_group = j.value("test_per_group", c.test_per_group);
  c.clutter = j.value("clutter", c.clutter);
  c.max_instances = j.value("max_instances", c.max_instances);
  return c;
}

SemanticSample render_synthetic_sample(const SyntheticConfig& config, const std::string& id,
                                       const std::vector<CategoryId>& allowed, Rng& rng) {
  if (allowed.empty()) throw ArgumentError("render_synthetic_sample: no allowed categories");
  Canvas cv(config.image_size);
  paint_background(cv, rng);
  const auto clutter = uniform_index(rng, static_cast<std::uint64_t>(config.clutter) + 1);
  for (std::uint64_t i = 0; i < clutter; ++i) paint_clutter(cv, rng);
  const auto instances = 1 + uniform_index(rng, static_cast<std::uint64_t>(config.max_instances));
  const int families = static_cast<int>(shape_family_names().size());
  for (std::uint64_t i = 0; i < instances; ++i) {
    const CategoryId c = allowed[uniform_index(rng, allowed.size())];
    paint_object(cv, (c - 1) % families, c, rng);
  }

  Image image(3, cv.size, cv.size);
  for (int y = 0; y < cv.size; ++y)
    for (int x = 0; x < cv.size; ++x) {
      const Rgb p = cv.at(y, x);
      image.at(0, y, x) = static_cast<float>(p.r);
      image.at(1, y, x) = static_cast<float>(p.g);
      image.at(2, y, x) = static_cast<float>(p.b);
    }
  // Quantise so the in-memory image equals what the 8-bit files hold.
  return {id, io::from_bytes(io::to_bytes(image)), std::move(cv.labels)};
}

Dataset generate_synthetic_dataset(const SyntheticConfig& config, std::uint64_t seed) {
  if (config.image_size < 16) throw ArgumentError("synthetic: image_size must be at least 16");
  if (config.num_categories <= 0 || config.num_categories % 4 != 0 || config.num_categories > 255)
    throw ArgumentError("synthetic: num_categories must be a multiple of 4 in 4..252");
  if (config.train_per_group < 0 || config.test_per_group < 0 || config.clutter < 0 ||
      config.max_instances < 1)
    throw ArgumentError("synthetic: negative counts");

  DatasetManifest manifest;
  manifest.name = config.name;
  manifest.seed = seed;
  manifest.image_size = config.image_size;
  manifest.generator = config.to_json();
  manifest.generator["renderer_version"] = kSyntheticRendererVersion;
  for (CategoryId id = 1; id <= config.num_categories; ++id)
    manifest.categories.push_back({id, category_name(id)});

  struct Job {
    int group;
    std::string split;
    int index;
  };
  std::vector<Job> jobs;
  for (int g = 1; g <= 4; ++g) {
    for (int i = 0; i < config.train_per_group; ++i) jobs.push_back({g, "train", i});
    for (int i = 0; i < config.test_per_group; ++i) jobs.push_back({g, "test", i});
  }

  std::vector<SemanticSample> samples(jobs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t n = 0; n < jobs.size(); ++n) {
    const auto& job = jobs[n];
    const auto block = block_fold_split(config.num_categories, job.group).test_categories;
    const std::vector<CategoryId> allowed(block.begin(), block.end());
    char id[64];
    std::snprintf(id, sizeof id, "g%d-%s-%04d", job.group, job.split.c_str(), job.index);
    Rng rng = make_rng(seed, "synthetic-sample", n);
    samples[n] = render_synthetic_sample(config, id, allowed, rng);
  }

  for (std::size_t n = 0; n < jobs.size(); ++n) {
    SampleRecord rec;
    rec.id = samples[n].id;
    rec.split = jobs[n].split;
    rec.group = jobs[n].group;
    rec.image_file = "images/" + rec.id + ".ppm";
    rec.label_file = "labels/" + rec.id + ".pgm";
    rec.categories = present_categories(samples[n].labels);
    manifest.samples.push_back(std::move(rec));
  }
  return Dataset(std::move(manifest), std::move(samples));
}

}  // namespace fewshot

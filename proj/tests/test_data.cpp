#include <doctest.h>

#include <fstream>
#include <map>

#include "fewshot/errors.hpp"
#include "fewshot/image_io.hpp"
#include "support.hpp"

using namespace fewshot;
namespace ft = fewshot::testing;

namespace {

void check_partition(const FoldSplit& f, const std::set<CategoryId>& universe) {
  for (CategoryId c : f.test_categories) CHECK_FALSE(f.train_categories.contains(c));
  std::set<CategoryId> all = f.train_categories;
  all.insert(f.test_categories.begin(), f.test_categories.end());
  CHECK(all == universe);
}

std::set<CategoryId> range_set(int lo, int hi) {
  std::set<CategoryId> s;
  for (int i = lo; i <= hi; ++i) s.insert(i);
  return s;
}

// Five categories, four samples each; every object is an 8x8 block.
Dataset balanced_five() {
  std::vector<SemanticSample> samples;
  for (int c = 1; c <= 5; ++c)
    for (int i = 0; i < 4; ++i) {
      SemanticSample s{"c" + std::to_string(c) + "-" + std::to_string(i), Image(3, 32, 32, 0.5f), LabelMap(1, 32, 32)};
      for (int y = 8; y < 16; ++y)
        for (int x = 4 * i; x < 4 * i + 8; ++x) s.labels.at(0, y, x) = static_cast<std::uint8_t>(c);
      // A second, smaller category in some images.
      if (i == 0) s.labels.at(0, 30, 30) = static_cast<std::uint8_t>(c % 5 + 1);
      samples.push_back(std::move(s));
    }
  return ft::make_dataset(std::move(samples), 5);
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("PASCAL folds follow the listed category order") {
    const auto f1 = pascal_fold_split(1);
    CHECK(f1.test_categories == std::set<CategoryId>{1, 2, 3, 4, 5});
    const auto& names = pascal_category_names();
    CHECK(names[0] == "aeroplane");
    CHECK(names[4] == "bottle");
    const auto f4 = pascal_fold_split(4);
    CHECK(f4.test_categories == std::set<CategoryId>{16, 17, 18, 19, 20});
    CHECK(names[15] == "potted plant");
    CHECK(names[18] == "train");
    for (int f = 1; f <= 4; ++f) {
      const auto s = pascal_fold_split(f);
      CHECK(s.train_categories.size() == 15);
      CHECK(s.test_categories.size() == 5);
      check_partition(s, range_set(1, 20));
    }
    CHECK_THROWS_AS(pascal_fold_split(0), ArgumentError);
    CHECK_THROWS_AS(pascal_fold_split(5), ArgumentError);
  }

  TEST_CASE("COCO folds are {4j-3+i}") {
    std::set<CategoryId> seen;
    for (int i = 0; i <= 3; ++i) {
      const auto s = coco_fold_split(i);
      std::set<CategoryId> expected;
      for (int j = 1; j <= 20; ++j) expected.insert(4 * j - 3 + i);
      CHECK(s.test_categories == expected);
      check_partition(s, range_set(1, 80));
      for (CategoryId c : s.test_categories) CHECK(seen.insert(c).second);
    }
    CHECK(seen == range_set(1, 80));
    CHECK(*coco_fold_split(0).test_categories.begin() == 1);
    CHECK(*coco_fold_split(0).test_categories.rbegin() == 77);
    CHECK(*coco_fold_split(3).test_categories.rbegin() == 80);
    CHECK_THROWS_AS(coco_fold_split(4), ArgumentError);
  }

  TEST_CASE("block folds partition the synthetic categories") {
    std::set<CategoryId> seen;
    for (int f = 1; f <= 4; ++f) {
      const auto s = block_fold_split(12, f);
      CHECK(s.test_categories == range_set(3 * f - 2, 3 * f));
      check_partition(s, range_set(1, 12));
      for (CategoryId c : s.test_categories) {
        CHECK(category_block(12, c) == f);
        seen.insert(c);
      }
    }
    CHECK(seen.size() == 12);
    CHECK_THROWS_AS(block_fold_split(10, 1), ArgumentError);
  }

  TEST_CASE("objectness labels mark every non-background pixel") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      SemanticSample s{"r", Image(3, 9, 7), LabelMap(1, 9, 7)};
      std::size_t nonzero = 0;
      for (auto& v : s.labels.values()) {
        v = uniform01(rng) < 0.4 ? static_cast<std::uint8_t>(1 + uniform_index(rng, 12)) : 0;
        nonzero += v != 0;
      }
      const auto m = derive_objectness_labels(s);
      for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 7; ++x) CHECK(m.get(y, x) == (s.labels.at(0, y, x) != 0));
      CHECK(m.count() == nonzero);
    }
    const auto empty = derive_objectness_labels(ft::labelled_sample("z", 4, 4, {}));
    CHECK(empty.count() == 0);
    const auto mixed = derive_objectness_labels(ft::labelled_sample("m", 2, 2, {{0, 0, 3}, {1, 1, 7}}));
    CHECK(mixed == ft::mask_from(2, 2, {{0, 0}, {1, 1}}));
  }

  TEST_CASE("binary masks reject values other than 0 and 1") {
    Tensor<std::uint8_t> bits(1, 2, 2);
    bits.at(0, 1, 1) = 2;
    CHECK_THROWS_AS(BinaryMask::from_tensor(bits), ValidationError);
  }

  TEST_CASE("flip is an involution that preserves category counts") {
    Rng rng(12);
    SemanticSample s{"f", ft::random_tensor<float>(3, 8, 6, rng, 0, 1), LabelMap(1, 8, 6)};
    for (auto& v : s.labels.values()) v = static_cast<std::uint8_t>(uniform_index(rng, 4));
    const auto once = flip_horizontal(s);
    CHECK(once.labels.at(0, 2, 0) == s.labels.at(0, 2, 5));
    CHECK(once.image.at(1, 3, 1) == s.image.at(1, 3, 4));
    const auto twice = flip_horizontal(once);
    CHECK(twice.image == s.image);
    CHECK(twice.labels == s.labels);
    CHECK(category_pixel_counts(once.labels) == category_pixel_counts(s.labels));
    Rng r0(1), r1(1);
    CHECK(horizontal_flip(s, r0, 0.0).labels == s.labels);
    CHECK(horizontal_flip(s, r1, 1.0).labels == once.labels);
  }

  TEST_CASE("episodes satisfy their invariants over many draws") {
    const auto ds = balanced_five();
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const EpisodeSampler sampler(ds, all, {1, 2, 3, 4, 5});
    Rng rng(13);
    for (int draw = 0; draw < 1000; ++draw) {
      const int shots = 1 + draw % 3;
      const Episode e = sampler.sample(shots, rng);
      REQUIRE(e.shots() == shots);
      const auto qcounts = category_pixel_counts(e.query.labels);
      CHECK(qcounts.at(e.target_category) >= static_cast<std::size_t>(kMinTargetPixels));
      std::set<std::string> ids{e.query.id};
      for (const auto& sp : e.supports) {
        CHECK(ids.insert(sp.sample.id).second);
        CHECK(sp.mask == category_mask(sp.sample, e.target_category));
        CHECK(sp.mask.count() >= static_cast<std::size_t>(kMinTargetPixels));
      }
      CHECK(e.query_mask() == category_mask(e.query, e.target_category));
    }
  }

  TEST_CASE("a fixed seed yields the same episode stream") {
    const auto ds = balanced_five();
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const EpisodeSampler sampler(ds, all, {1, 2, 3, 4, 5});
    Rng a(99), b(99);
    for (int i = 0; i < 200; ++i) {
      const auto x = sampler.draw(2, a), y = sampler.draw(2, b);
      CHECK(x.category == y.category);
      CHECK(x.query == y.query);
      CHECK(x.supports == y.supports);
    }
  }

  TEST_CASE("category selection stays inside binomial bounds") {
    // n = 1000, p = 1/5: mean 200, sd ~12.6; [150, 250] is about four sd.
    const auto ds = balanced_five();
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const EpisodeSampler sampler(ds, all, {1, 2, 3, 4, 5});
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      Rng rng = make_rng(seed, "binomial");
      std::map<CategoryId, int> hits;
      for (int i = 0; i < 1000; ++i) ++hits[sampler.draw(1, rng).category];
      for (CategoryId c = 1; c <= 5; ++c) {
        CAPTURE(seed);
        CAPTURE(c);
        CHECK(hits[c] >= 150);
        CHECK(hits[c] <= 250);
      }
    }
  }

  TEST_CASE("sampler reports an exhausted pool") {
    const auto ds = balanced_five();
    const EpisodeSampler sampler(ds, {0, 1}, {1});
    Rng rng(1);
    CHECK_NOTHROW(sampler.draw(1, rng));
    CHECK_THROWS_AS(sampler.draw(2, rng), SamplingError);
    CHECK_THROWS_AS(sampler.draw(0, rng), ArgumentError);
    CHECK_THROWS_AS(EpisodeSampler(ds, {0}, {}), ArgumentError);
  }

  TEST_CASE("grid eligibility checks both orientations") {
    // Nearest sampling 32 -> 8 reads columns 2, 6, ..., 30.
    BinaryMask only_col2(32, 32), only_col29(32, 32), both(32, 32);
    for (int y = 0; y < 32; ++y) {
      only_col2.set(y, 2, true);
      only_col29.set(y, 29, true);
      both.set(y, 2, true);
      both.set(y, 29, true);
    }
    // Mirroring maps column 2 to 29 and 29 to 2.
    CHECK_FALSE(survives_grid(only_col2, 8, 8));
    CHECK_FALSE(survives_grid(only_col29, 8, 8));
    CHECK(survives_grid(both, 8, 8));

    SemanticSample s{"thin", Image(3, 32, 32, 0.5f), LabelMap(1, 32, 32)};
    for (int y = 0; y < 32; ++y) s.labels.at(0, y, 3) = 1;  // column 3 is never sampled
    SemanticSample t = s;
    t.id = "thin2";
    const auto ds = ft::make_dataset({s, t}, 1);
    CHECK(EpisodeSampler(ds, {0, 1}, {1}).eligible_samples(1).size() == 2);
    CHECK(EpisodeSampler(ds, {0, 1}, {1}, Eligibility{kMinTargetPixels, 8, 8}).eligible_samples(1).empty());
  }

  TEST_CASE("synthetic generation is deterministic and class-disjoint") {
    const auto cfg = ft::tiny_synthetic();
    const auto a = generate_synthetic_dataset(cfg, 5);
    const auto b = generate_synthetic_dataset(cfg, 5);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a.sample(i).image == b.sample(i).image);
      CHECK(a.sample(i).labels == b.sample(i).labels);
    }
    CHECK(a.manifest().to_json() == b.manifest().to_json());
    const auto c = generate_synthetic_dataset(cfg, 6);
    CHECK_FALSE(a.sample(0).image == c.sample(0).image);

    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto& rec = a.record(i);
      const auto present = present_categories(a.sample(i).labels);
      CHECK(present == rec.categories);
      CHECK(present.size() >= 1);
      CHECK(present.size() <= 3);
      for (CategoryId cat : present) CHECK(category_block(12, cat) == rec.group);
    }
    for (int f = 1; f <= 4; ++f) {
      const auto split = block_fold_split(12, f);
      const auto pool = a.train_pool(split);
      CHECK_FALSE(pool.empty());
      for (std::size_t i : pool) {
        CHECK(a.record(i).split == "train");
        for (CategoryId cat : a.record(i).categories) CHECK_FALSE(split.test_categories.contains(cat));
      }
      std::set<CategoryId> seen;
      for (std::size_t i : a.test_pool(split)) {
        CHECK(a.record(i).split == "test");
        seen.insert(a.record(i).categories.begin(), a.record(i).categories.end());
      }
      for (CategoryId cat : split.test_categories) CHECK(seen.contains(cat));
    }
  }

  TEST_CASE("default generation gives every category at least 30 train samples") {
    const auto ds = generate_synthetic_dataset(SyntheticConfig{}, 1);
    std::map<CategoryId, int> train_count;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.record(i).split == "train")
        for (CategoryId c : ds.record(i).categories) ++train_count[c];
    for (CategoryId c = 1; c <= 12; ++c) CHECK(train_count[c] >= 30);
    CHECK(ds.sample(0).height() == 64);
  }

  TEST_CASE("without clutter, labels only come from rendered shapes") {
    auto cfg = ft::tiny_synthetic(8);
    cfg.clutter = 0;
    const auto ds = generate_synthetic_dataset(cfg, 3);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto counts = category_pixel_counts(ds.sample(i).labels);
      std::size_t fg = 0;
      for (auto [c, n] : counts)
        if (c != kBackground) fg += n;
      const std::size_t total = ds.sample(i).labels.size();
      CHECK(total - fg > fg);
    }
  }

  TEST_CASE("datasets round-trip through disk and detect tampering") {
    ft::TempDir dir("dataset");
    const auto ds = generate_synthetic_dataset(ft::tiny_synthetic(8), 4);
    write_dataset(ds, dir.path());
    const auto loaded = load_dataset(dir.path());
    REQUIRE(loaded.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      CHECK(loaded.sample(i).labels == ds.sample(i).labels);
      CHECK(loaded.sample(i).image == ds.sample(i).image);
    }
    const auto digest = dataset_digest(dir.path());
    ft::TempDir again("dataset-again");
    write_dataset(generate_synthetic_dataset(ft::tiny_synthetic(8), 4), again.path());
    CHECK(dataset_digest(again.path()) == digest);

    // Relabel one sample so its stored categories drift from the manifest.
    const auto& rec = ds.record(1);
    LabelMap wrong(1, 32, 32);
    wrong.at(0, 0, 0) = 12;
    io::write_pgm(dir.path() / rec.label_file, wrong);
    try {
      load_dataset(dir.path());
      FAIL("tampered dataset loaded");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find(rec.id) != std::string::npos);
    }
    CHECK_THROWS_AS(load_dataset(dir.path() / "missing"), IoError);
  }

  TEST_CASE("class-agnostic feed refuses held-out categories") {
    const auto ds = balanced_five();
    CHECK_NOTHROW(ClassAgnosticFeed(ds, {4, 5}, {1}));
    try {
      ClassAgnosticFeed(ds, {0, 5}, {1});
      FAIL("feed accepted a held-out category");
    } catch (const AuditError& e) {
      CHECK(std::string(e.what()).find("c1-0") != std::string::npos);
    }
  }
}

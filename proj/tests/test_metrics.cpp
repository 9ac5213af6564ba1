#include <doctest.h>

#include <algorithm>

#include "fewshot/metrics.hpp"
#include "support.hpp"

using namespace fewshot;
namespace ft = fewshot::testing;

namespace {

// Pixel-loop counts, independent of confusion().
double iou_oracle(const BinaryMask& p, const BinaryMask& g, bool positive = true) {
  long inter = 0, uni = 0;
  for (int y = 0; y < p.height(); ++y)
    for (int x = 0; x < p.width(); ++x) {
      const bool a = p.get(y, x) == positive, b = g.get(y, x) == positive;
      inter += a && b;
      uni += a || b;
    }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

EpisodeResult episode(CategoryId c, std::uint64_t tp, std::uint64_t fp, std::uint64_t fn, std::uint64_t tn) {
  return {c, Confusion{tp, fp, fn, tn}};
}

std::vector<EpisodeResult> random_results(Rng& rng, int n, const std::set<CategoryId>& cats) {
  std::vector<EpisodeResult> out;
  const std::vector<CategoryId> pool(cats.begin(), cats.end());
  for (int i = 0; i < n; ++i) {
    const int h = 1 + static_cast<int>(uniform_index(rng, 16)), w = 1 + static_cast<int>(uniform_index(rng, 16));
    const auto p = ft::random_mask(h, w, rng), g = ft::random_mask(h, w, rng);
    out.push_back({pool[i % pool.size()], confusion(p, g)});
  }
  return out;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("binary IoU hand cases") {
    const auto gt = ft::mask_from(2, 2, {{0, 0}, {0, 1}});
    const auto pred = ft::mask_from(2, 2, {{0, 1}, {1, 1}});
    CHECK(binary_iou(pred, gt) == 1.0 / 3.0);
    CHECK(binary_iou(gt, gt) == 1.0);
    CHECK(binary_iou(ft::mask_from(2, 2, {{1, 0}}), gt) == 0.0);
    CHECK(binary_iou(BinaryMask(3, 3), BinaryMask(3, 3)) == 1.0);
    CHECK_THROWS_AS(binary_iou(BinaryMask(2, 2), BinaryMask(2, 3)), ArgumentError);
  }

  TEST_CASE("IoU and FB-IoU match brute-force counting on random pairs") {
    Rng rng(51);
    for (int trial = 0; trial < 500; ++trial) {
      const int h = 1 + static_cast<int>(uniform_index(rng, 32)), w = 1 + static_cast<int>(uniform_index(rng, 32));
      const auto p = ft::random_mask(h, w, rng, uniform01(rng)), g = ft::random_mask(h, w, rng, uniform01(rng));
      CHECK(binary_iou(p, g) == iou_oracle(p, g));
      const EpisodeResult e{1, confusion(p, g)};
      CHECK(e.counts.bg_iou() == iou_oracle(p, g, false));
      const double fb = compute_fbiou(std::span(&e, 1));
      CHECK(fb == 0.5 * (iou_oracle(p, g) + iou_oracle(p, g, false)));
      CHECK(fb >= 0.0);
      CHECK(fb <= 1.0);
      CHECK(compute_miou(std::span(&e, 1), {1}).miou == iou_oracle(p, g));
    }
  }

  TEST_CASE("mIoU is the unweighted mean of dataset-level category IoUs") {
    // Category 1: 2/4 over two episodes; category 2: 1/4.
    const std::vector<EpisodeResult> r{episode(1, 1, 1, 0, 10), episode(1, 1, 0, 1, 10), episode(2, 1, 3, 0, 0)};
    const auto m = compute_miou(r, {1, 2});
    CHECK(m.per_category.at(1) == 0.5);
    CHECK(m.per_category.at(2) == 0.25);
    CHECK(m.miou == 0.375);
    // Episodes outside the test set do not count.
    auto extra = r;
    extra.push_back(episode(9, 0, 5, 5, 0));
    CHECK(compute_miou(extra, {1, 2}).miou == 0.375);
  }

  TEST_CASE("FB-IoU hand cases") {
    // FG IoU 3/5 = 0.6, BG IoU 8/10 = 0.8.
    const auto single = episode(1, 3, 1, 1, 8);
    CHECK(compute_fbiou(std::span(&single, 1)) == doctest::Approx(0.7).epsilon(1e-15));
    // All-foreground prediction on a half-foreground 2x2 ground truth.
    BinaryMask all(2, 2);
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) all.set(y, x, true);
    const EpisodeResult half{1, confusion(all, ft::mask_from(2, 2, {{0, 0}, {0, 1}}))};
    CHECK(half.counts.fg_iou() == 0.5);
    CHECK(half.counts.bg_iou() == 0.0);
    CHECK(compute_fbiou(std::span(&half, 1)) == 0.25);
  }

  TEST_CASE("the two FB-IoU conventions differ when episode sizes differ") {
    const std::vector<EpisodeResult> r{episode(1, 1, 0, 0, 1), episode(1, 0, 10, 10, 0)};
    CHECK(compute_fbiou(r, FbIouMode::per_episode) == 0.5);
    CHECK(compute_fbiou(r, FbIouMode::dataset) == doctest::Approx(0.5 * (1.0 / 21 + 1.0 / 21)));
  }

  TEST_CASE("perfect predictions score 1 everywhere") {
    Rng rng(52);
    std::vector<EpisodeResult> r;
    for (int i = 0; i < 20; ++i) {
      const auto g = ft::random_mask(8, 8, rng);
      r.push_back({static_cast<CategoryId>(1 + i % 3), confusion(g, g)});
    }
    const auto f = FoldMetrics::from_results(1, r, {1, 2, 3});
    CHECK(f.miou == 1.0);
    CHECK(f.fbiou == 1.0);
    CHECK(f.fbiou_dataset == 1.0);
    for (const auto& [c, v] : f.category_iou) CHECK(v == 1.0);
  }

  TEST_CASE("metrics ignore order and chunking") {
    Rng rng(53);
    const std::set<CategoryId> cats{1, 2, 3, 4};
    const auto r = random_results(rng, 200, cats);
    const auto base = FoldMetrics::from_results(1, r, cats);

    auto shuffled = r;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto perm = FoldMetrics::from_results(1, shuffled, cats);
    CHECK(perm.miou == base.miou);
    CHECK(perm.fbiou == base.fbiou);
    CHECK(perm.category_iou == base.category_iou);

    MetricsAccumulator a, b, c;
    for (std::size_t i = 0; i < r.size(); ++i) (i < 70 ? a : i < 130 ? b : c).add(r[i]);
    MetricsAccumulator merged;
    merged.merge(c);
    merged.merge(a);
    merged.merge(b);
    const auto chunked = FoldMetrics::from_results(1, merged.results(), cats);
    CHECK(chunked.miou == base.miou);
    CHECK(chunked.fbiou == base.fbiou);
    CHECK(chunked.fbiou_dataset == base.fbiou_dataset);
  }

  TEST_CASE("protocol and argument errors") {
    const std::vector<EpisodeResult> r{episode(1, 1, 0, 0, 1)};
    CHECK_THROWS_AS(compute_miou(r, {1, 2}), ProtocolError);
    CHECK_THROWS_AS(compute_miou(r, {}), ArgumentError);
    CHECK_THROWS_AS(compute_fbiou({}), ArgumentError);
  }

  TEST_CASE("report JSON round-trips and serialises canonically") {
    Rng rng(54);
    MetricsReport rep;
    rep.label = "obj";
    rep.fingerprint = "abc123";
    rep.seed = 7;
    rep.shots = 1;
    for (int fold = 1; fold <= 2; ++fold)
      rep.folds.push_back(FoldMetrics::from_results(fold, random_results(rng, 30, {1, 2, 3}), {1, 2, 3}));
    const auto back = MetricsReport::from_json(rep.to_json());
    CHECK(back.to_text() == rep.to_text());
    CHECK(back.mean_miou() == rep.mean_miou());
    CHECK(back.episode_count() == 60);
    const auto j = rep.to_json();
    CHECK(j.contains("conventions"));
    CHECK_THROWS_AS(MetricsReport::from_json(nlohmann::json{{"label", 3}}), ValidationError);
  }

  TEST_CASE("table has one column per fold plus mean and FB-IoU") {
    MetricsReport a, b;
    a.label = "baseline";
    b.label = "objectness";
    for (int fold = 1; fold <= 4; ++fold) {
      FoldMetrics f;
      f.fold = fold;
      f.miou = 0.1 * fold;
      f.fbiou = 0.5;
      a.folds.push_back(f);
      f.miou += 0.05;
      b.folds.push_back(f);
    }
    const std::string t = render_table({a, b});
    CHECK(t.find("Fold-1") != std::string::npos);
    CHECK(t.find("Fold-4") != std::string::npos);
    CHECK(t.find("Mean") != std::string::npos);
    CHECK(t.find("FB-IoU") != std::string::npos);
    CHECK(t.find("baseline   |    10.0    20.0    30.0    40.0    25.0 |    50.0") != std::string::npos);
    CHECK(t.find("objectness |    15.0") != std::string::npos);
    CHECK(std::count(t.begin(), t.end(), '\n') == 4);
  }
}

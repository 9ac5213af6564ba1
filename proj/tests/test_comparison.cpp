#include <doctest.h>

#include <cmath>

#include "fewshot/comparison.hpp"
#include "support.hpp"

using namespace fewshot;
namespace ft = fewshot::testing;

namespace {

HeadArch small_arch(HeadVariant v, int dims = 6, bool objectness = true) {
  HeadArch a;
  a.variant = v;
  a.feature_dims = dims;
  a.use_objectness = objectness;
  a.reduce = 4;
  a.branch = 4;
  a.fuse1 = 5;
  a.fuse2 = 4;
  return a;
}

BinaryMask diagonal_mask(int h, int w) {
  BinaryMask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.set(y, x, (y + x) % 3 == 0);
  return m;
}

}  // namespace

TEST_SUITE("comparison") {
  TEST_CASE("assembled input has 2d+1 channels in query, support, objectness order") {
    Rng rng(41);
    const auto q = ft::random_tensor<double>(5, 4, 6, rng);
    SupportVector<double> v{{1, 2, 3, 4, 5}};
    ProbabilityMap<double> obj{ft::random_tensor<double>(1, 4, 6, rng, 0, 1)};
    const auto x = assemble_input(q, v, std::optional{obj});
    REQUIRE(x.channels() == 11);
    for (int y = 0; y < 4; ++y)
      for (int xx = 0; xx < 6; ++xx) {
        for (int c = 0; c < 5; ++c) {
          CHECK(x.at(c, y, xx) == q.at(c, y, xx));
          CHECK(x.at(5 + c, y, xx) == v.values[c]);
        }
        CHECK(x.at(10, y, xx) == doctest::Approx(obj.probs.at(0, y, xx)));
      }
    CHECK(assemble_input<double>(q, v, std::nullopt).channels() == 10);
    CHECK_THROWS_AS(assemble_input<double>(q, SupportVector<double>{{1, 2}}, std::nullopt), ArgumentError);
  }

  TEST_CASE("objectness is resized to the feature grid") {
    Rng rng(42);
    const auto q = ft::random_tensor<double>(2, 4, 4, rng);
    SupportVector<double> v{{0, 0}};
    ProbabilityMap<double> obj{Tensor<double>(1, 16, 16, 0.3)};
    const auto x = assemble_input(q, v, std::optional{obj});
    for (int y = 0; y < 4; ++y)
      for (int xx = 0; xx < 4; ++xx) CHECK(x.at(4, y, xx) == doctest::Approx(0.3));
  }

  TEST_CASE("zero query and support give a zero assembled input") {
    SupportVector<double> v{std::vector<double>(3, 0.0)};
    const auto x = assemble_input<double>(Tensor<double>(3, 5, 5), v, std::nullopt);
    for (double e : x.values()) CHECK(e == 0.0);
  }

  TEST_CASE("head outputs two scores on the input grid for both variants") {
    Rng rng(43);
    for (auto variant : {HeadVariant::aspp, HeadVariant::fem}) {
      for (bool obj : {true, false}) {
        const auto a = small_arch(variant, 6, obj);
        ComparisonHead<float> head(a, 7);
        const auto x = ft::random_tensor<float>(a.input_channels(), 8, 12, rng, 0, 1);
        const auto t = head.forward(x);
        CHECK(t.scores.channels() == 2);
        CHECK(t.scores.height() == 8);
        CHECK(t.scores.width() == 12);
        CHECK(multiscale_forward(head, x).same_shape(t.ms.output));
        CHECK_THROWS_AS(head.forward(ft::random_tensor<float>(a.input_channels() + 1, 8, 12, rng)), ArgumentError);
      }
    }
    CHECK(parse_head_variant("fem") == HeadVariant::fem);
    CHECK(to_string(HeadVariant::aspp) == "aspp");
    CHECK_THROWS_AS(parse_head_variant("psp"), ConfigError);
  }

  TEST_CASE("initialisation is paired across the objectness ablation") {
    ComparisonHead<double> with(small_arch(HeadVariant::aspp, 6, true), 9);
    ComparisonHead<double> without(small_arch(HeadVariant::aspp, 6, false), 9);
    auto pa = with.parameters(), pb = without.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 1; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
    // The reduce layer shares its 2d class-specific input columns.
    for (int o = 0; o < 4; ++o)
      for (int c = 0; c < 12; ++c) CHECK(pa[0]->value[o * 13 + c] == pb[0]->value[o * 12 + c]);
  }

  TEST_CASE("ASPP branches with equal rates and weights agree") {
    Rng rng(44);
    auto a = small_arch(HeadVariant::aspp);
    a.rates = {1, 1, 1, 1};
    ComparisonHead<double> head(a, 3);
    for (int i = 1; i < 4; ++i) {
      head.branch(i).weight().value = head.branch(0).weight().value;
      head.branch(i).bias().value = head.branch(0).bias().value;
    }
    const auto t = head.multiscale(ft::random_tensor<double>(a.input_channels(), 8, 8, rng));
    for (int i = 1; i < 4; ++i) CHECK(t.branch_out[i] == t.branch_out[0]);
  }

  TEST_CASE("equal scores are foreground") {
    Tensor<float> scores(2, 2, 2, 0.7f);
    const auto p = predict_from_scores(scores, 8, 8);
    CHECK(p.binary.count() == 64);
    scores.at(0, 0, 0) = 5.0f;
    CHECK(predict_from_scores(scores, 2, 2).binary.count() == 3);
    CHECK(foreground_probability(Tensor<double>(2, 1, 1)).at(0, 0, 0) == 0.5);
  }

  TEST_CASE("non-finite scores are rejected") {
    Tensor<float> scores(2, 2, 2);
    scores.at(1, 1, 1) = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(predict_from_scores(scores, 4, 4), NumericError);
  }

  TEST_CASE("segmentation loss resizes ground truth to the score grid") {
    Tensor<double> scores(2, 2, 2);
    BinaryMask gt(8, 8);
    CHECK(segmentation_loss(scores, gt) == doctest::Approx(std::log(2.0)));
    CHECK_THROWS_AS(segmentation_loss(Tensor<double>(3, 2, 2), gt), ArgumentError);
  }

  TEST_CASE("head backward matches finite differences") {
    for (auto variant : {HeadVariant::aspp, HeadVariant::fem}) {
      CAPTURE(to_string(variant));
      auto a = small_arch(variant);
      ComparisonHead<double> head(a, 11);
      Rng rng(3);
      auto x = ft::random_tensor<double>(a.input_channels(), 8, 8, rng, 0, 1);
      const auto gt = diagonal_mask(8, 8);
      auto params = head.parameters();
      nn::zero_grad(params);
      const auto tr = head.forward(x);
      Tensor<double> g;
      segmentation_loss(tr.scores, gt, &g);
      const auto gx = head.backward(tr, g);
      auto loss = [&] { return segmentation_loss(head.forward(x).scores, gt); };
      auto fd = [&](double& slot) {
        const double old = slot, eps = 1e-6;
        slot = old + eps;
        const double lp = loss();
        slot = old - eps;
        const double lm = loss();
        slot = old;
        return (lp - lm) / (2 * eps);
      };
      int checked = 0;
      for (auto* p : params)
        for (int k = 0; k < 3; ++k) {
          const std::size_t i = uniform_index(rng, p->size());
          const double num = fd(p->value[i]), an = p->grad[i];
          if (std::abs(num) + std::abs(an) < 1e-9) continue;
          CAPTURE(p->name);
          CHECK(std::abs(num - an) / (std::abs(num) + std::abs(an)) <= 1e-4);
          ++checked;
        }
      CHECK(checked >= 20);
      for (int k = 0; k < 5; ++k) {
        const std::size_t i = uniform_index(rng, x.size());
        const double num = fd(x.data()[i]);
        CHECK(gx.data()[i] == doctest::Approx(num).epsilon(1e-4).scale(1e-6));
      }
    }
  }

  TEST_CASE("ASPP scores are translation-consistent away from the border") {
    // A window shifted by 4 cells sees the same interior scores; the
    // objectness map is cropped along with the features.
    Rng rng(45);
    const auto a = small_arch(HeadVariant::aspp);
    ComparisonHead<double> head(a, 5);
    const int big = 40, win = 36, off = 4, margin = 11;
    const auto q = ft::random_tensor<double>(6, big, big, rng, 0, 1);
    SupportVector<double> v{{0.1, 0.5, 0.2, 0.9, 0.3, 0.4}};
    ProbabilityMap<double> obj{ft::random_tensor<double>(1, big, big, rng, 0, 1)};

    Tensor<double> qc(6, win, win);
    ProbabilityMap<double> oc{Tensor<double>(1, win, win)};
    for (int y = 0; y < win; ++y)
      for (int x = 0; x < win; ++x) {
        for (int c = 0; c < 6; ++c) qc.at(c, y, x) = q.at(c, y + off, x + off);
        oc.probs.at(0, y, x) = obj.probs.at(0, y + off, x + off);
      }
    const auto full = head.forward(assemble_input(q, v, std::optional{obj})).scores;
    const auto crop = head.forward(assemble_input(qc, v, std::optional{oc})).scores;
    double worst = 0.0;
    for (int c = 0; c < 2; ++c)
      for (int y = margin; y < win - margin; ++y)
        for (int x = margin; x < win - margin; ++x)
          worst = std::max(worst, std::abs(crop.at(c, y, x) - full.at(c, y + off, x + off)));
    CHECK(worst < 1e-9);
  }
}

#include <doctest.h>

#include <cmath>

#include "fewshot/objectness.hpp"
#include "support.hpp"

using namespace fewshot;
namespace ft = fewshot::testing;

namespace {

// Direct per-pixel binary cross-entropy with clamping.
double bce_oracle(const Tensor<double>& p, const BinaryMask& gt) {
  double s = 0.0;
  for (int y = 0; y < p.height(); ++y)
    for (int x = 0; x < p.width(); ++x) {
      const double q = std::clamp(p.at(0, y, x), 1e-7, 1 - 1e-7);
      s += gt.get(y, x) ? -std::log(q) : -std::log(1 - q);
    }
  return s / (p.height() * p.width());
}

ObjectnessArch tiny_arch() {
  ObjectnessArch a;
  a.preset = "test";
  a.widths = {2, 3, 4};
  return a;
}

}  // namespace

TEST_SUITE("objectness") {
  TEST_CASE("predictions are probabilities at input resolution") {
    Rng init(31), rng(32);
    ObjectnessNet<float> net(ObjectnessArch::from_preset("small"), init);
    for (int trial = 0; trial < 5; ++trial) {
      const auto image = ft::random_tensor<float>(3, 24, 40, rng, 0, 1);
      const auto m = predict_objectness(net, image);
      CHECK(m.height() == 24);
      CHECK(m.width() == 40);
      for (float v : m.probs.values()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
      }
      CHECK(m.probs == predict_objectness(net, image).probs);
    }
    CHECK_THROWS_AS(predict_objectness(net, Image(3, 20, 20, 0.5f)), ArgumentError);
    Image bad(3, 16, 16, 0.5f);
    bad.at(1, 3, 3) = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(predict_objectness(net, bad), ValidationError);
  }

  TEST_CASE("loss: uniform prediction costs ln 2 and a perfect one nothing") {
    Rng rng(33);
    const auto gt = ft::random_mask(8, 8, rng);
    ProbabilityMap<double> half{Tensor<double>(1, 8, 8, 0.5)};
    CHECK(objectness_loss(half, gt) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    ProbabilityMap<double> perfect{Tensor<double>(1, 8, 8)};
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) perfect.probs.at(0, y, x) = gt.get(y, x) ? 1.0 : 0.0;
    CHECK(objectness_loss(perfect, gt) <= 1e-6);
  }

  TEST_CASE("loss matches the per-pixel oracle and ignores pixel order") {
    Rng rng(34);
    for (int trial = 0; trial < 50; ++trial) {
      const int h = 1 + static_cast<int>(uniform_index(rng, 12)), w = 1 + static_cast<int>(uniform_index(rng, 12));
      ProbabilityMap<double> p{ft::random_tensor<double>(1, h, w, rng, 0, 1)};
      const auto gt = ft::random_mask(h, w, rng);
      const double loss = objectness_loss(p, gt);
      CHECK(loss == doctest::Approx(bce_oracle(p.probs, gt)).epsilon(1e-12));

      // Reverse the pixel order of both maps.
      ProbabilityMap<double> rp{Tensor<double>(1, h, w)};
      BinaryMask rg(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          rp.probs.at(0, h - 1 - y, w - 1 - x) = p.probs.at(0, y, x);
          rg.set(h - 1 - y, w - 1 - x, gt.get(y, x));
        }
      CHECK(objectness_loss(rp, rg) == doctest::Approx(loss).epsilon(1e-12));
    }
  }

  TEST_CASE("loss stays finite at saturated probabilities") {
    ProbabilityMap<double> p{Tensor<double>(1, 1, 2)};
    p.probs.at(0, 0, 0) = 0.0;
    p.probs.at(0, 0, 1) = 1.0;
    const auto gt = ft::mask_from(1, 2, {{0, 0}});
    const double loss = objectness_loss(p, gt);
    CHECK(std::isfinite(loss));
    CHECK(loss == doctest::Approx(-std::log(1e-7)).epsilon(1e-6));
  }

  TEST_CASE("ground truth at a different resolution is aligned by nearest neighbour") {
    ProbabilityMap<double> p{Tensor<double>(1, 2, 2, 0.9)};
    BinaryMask gt(8, 8);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) gt.set(y, x, true);
    CHECK(objectness_loss(p, gt) == doctest::Approx(-std::log(0.9)));
  }

  TEST_CASE("gradient of the sigmoid head is (p - y) / N") {
    Tensor<double> probs(1, 2, 2, 0.25);
    const auto gt = ft::mask_from(2, 2, {{1, 1}});
    const auto g = objectness_loss_grad(probs, gt);
    CHECK(g.at(0, 0, 0) == doctest::Approx(0.25 / 4));
    CHECK(g.at(0, 1, 1) == doctest::Approx(-0.75 / 4));
  }

  TEST_CASE("network backward matches finite differences in double") {
    Rng init(35), rng(36);
    ObjectnessNet<double> net(tiny_arch(), init);
    const auto image = ft::random_tensor<float>(3, 16, 16, rng, 0, 1);
    const auto gt = ft::random_mask(16, 16, rng);
    auto loss = [&] { return objectness_loss(ProbabilityMap<double>{net.forward(image).probs}, gt); };
    auto params = net.parameters();
    nn::zero_grad(params);
    const auto trace = net.forward(image);
    net.backward(trace, objectness_loss_grad(trace.probs, gt));
    int checked = 0;
    for (auto* p : params)
      for (int k = 0; k < 2; ++k) {
        const std::size_t i = uniform_index(rng, p->size());
        const double old = p->value[i], eps = 1e-6;
        p->value[i] = old + eps;
        const double lp = loss();
        p->value[i] = old - eps;
        const double lm = loss();
        p->value[i] = old;
        const double num = (lp - lm) / (2 * eps), an = p->grad[i];
        if (std::abs(num) + std::abs(an) < 1e-10) continue;
        CAPTURE(p->name);
        CHECK(std::abs(num - an) / std::max(std::abs(num), std::abs(an)) <= 1e-4);
        ++checked;
      }
    CHECK(checked >= 20);
  }

  TEST_CASE("presets grow in parameter count") {
    std::size_t last = 0;
    for (const auto& name : ObjectnessArch::preset_names()) {
      Rng init(1);
      ObjectnessNet<float> net(ObjectnessArch::from_preset(name), init);
      CHECK(net.parameter_count() > last);
      last = net.parameter_count();
    }
    CHECK_THROWS_AS(ObjectnessArch::from_preset("huge"), ConfigError);
  }

  TEST_CASE("training is deterministic and learning rate zero changes nothing") {
    const Dataset ds = generate_synthetic_dataset(ft::tiny_synthetic(4), 3);
    const auto fold = block_fold_split(ds.num_categories(), 1);
    const ClassAgnosticFeed feed(ds, ds.train_pool(fold), fold.test_categories);
    nn::Schedule s{1, 4, {0.05, 0.9, 0.0}, 0.5};

    auto train = [&](const nn::Schedule& sched) {
      Rng init(2), rng(3);
      ObjectnessNet<float> net(ObjectnessArch::from_preset("small"), init);
      const auto result = train_objectness(net, feed, sched, rng);
      return std::pair{nn::digest(net.parameters()), result.curve};
    };
    const auto a = train(s), b = train(s);
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
    REQUIRE(a.second.size() == 1);
    CHECK(std::isfinite(a.second[0]));

    Rng init(2);
    ObjectnessNet<float> fresh(ObjectnessArch::from_preset("small"), init);
    s.sgd.learning_rate = 0.0;
    CHECK(train(s).first == nn::digest(fresh.parameters()));
  }

  TEST_CASE("a diverging run reports where it failed") {
    const Dataset ds = generate_synthetic_dataset(ft::tiny_synthetic(4), 3);
    const auto fold = block_fold_split(ds.num_categories(), 1);
    const ClassAgnosticFeed feed(ds, ds.train_pool(fold), fold.test_categories);
    Rng init(2), rng(3);
    ObjectnessNet<float> net(ObjectnessArch::from_preset("small"), init);
    try {
      train_objectness(net, feed, nn::Schedule{3, 4, {1e12, 0.9, 0.0}, 0.5}, rng);
      FAIL("expected divergence");
    } catch (const NumericError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("epoch") != std::string::npos);
      CHECK(msg.find("learning rate") != std::string::npos);
    }
  }
}

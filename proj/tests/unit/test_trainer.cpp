#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "rapnet/error.hpp"
#include "rapnet/trainer.hpp"

using namespace rapnet;
using namespace rapnet::train;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.input_T = 16;
  c.input_D = 8;
  c.levels = 2;
  c.anchors_per_level = 2;
  c.trunk_channels = 8;
  return c;
}

anchors::AnchorSet tiny_anchors() { return {{{0.1, 0.2}, {0.35, 0.6}}}; }

std::vector<Example> tiny_corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  std::vector<Example> out;
  for (std::size_t v = 0; v < n; ++v) {
    Example e;
    e.video_id = "t" + std::to_string(v);
    const std::size_t a = 2 + rng() % 6;
    const std::size_t w = 2 + rng() % 6;
    e.gts.push_back({a / 16.0, (a + w) / 16.0});
    e.features = nn::Tensor({16, 8});
    for (std::size_t t = 0; t < 16; ++t) {
      const bool inside = t >= a && t < a + w;
      for (std::size_t d = 0; d < 8; ++d) {
        e.features.at(t, d) = (d < 2 ? (inside ? 1.0 : -1.0) : 0.0) + noise(rng);
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<const Example*> pointers(const std::vector<Example>& c) {
  std::vector<const Example*> p;
  for (const auto& e : c) p.push_back(&e);
  return p;
}

}  // namespace

TEST_CASE("zero learning rate leaves parameters untouched") {
  auto corpus = tiny_corpus(4, 0);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 2;
  const auto initial = model::build_model(tiny_config());
  Trainer t(model::build_model(tiny_config()), cfg, tiny_anchors());
  t.run_epoch(corpus);
  CHECK(t.model().params == initial.params);
}

TEST_CASE("plain sgd step matches p - lr * grad") {
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::kSgdMomentum;
  cfg.momentum = 0.0;
  cfg.learning_rate = 0.1;
  nn::ParameterSet ps;
  ps.add("w", nn::Tensor({3}, {1.0, -2.0, 0.5}));
  ps.get("w").grad = nn::Tensor({3}, {0.5, 1.0, -4.0});
  Optimizer opt(cfg);
  opt.step(ps);
  const auto& v = ps.get("w").value;
  CHECK(v[0] == 1.0 - 0.1 * 0.5);
  CHECK(v[1] == -2.0 - 0.1 * 1.0);
  CHECK(v[2] == 0.5 - 0.1 * -4.0);
}

TEST_CASE("adam matches a hand-rolled update over three steps") {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  nn::ParameterSet ps;
  ps.add("w", nn::Tensor({2}, {0.3, -0.7}));
  Optimizer opt(cfg);
  double p[2] = {0.3, -0.7}, m[2] = {0, 0}, v[2] = {0, 0};
  const double grads[3][2] = {{0.2, -1.0}, {0.1, 0.5}, {-0.3, 0.0}};
  for (int s = 0; s < 3; ++s) {
    ps.get("w").grad = nn::Tensor({2}, {grads[s][0], grads[s][1]});
    opt.step(ps);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[s][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[s][i] * grads[s][i];
      const double mh = m[i] / (1 - std::pow(0.9, s + 1));
      const double vh = v[i] / (1 - std::pow(0.999, s + 1));
      p[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    CHECK(ps.get("w").value[0] == doctest::Approx(p[0]).epsilon(1e-14));
    CHECK(ps.get("w").value[1] == doctest::Approx(p[1]).epsilon(1e-14));
  }
  CHECK(opt.steps() == 3);
}

TEST_CASE("global norm clipping") {
  nn::ParameterSet ps;
  ps.add("a", nn::Tensor({2}, 0.0));
  ps.add("b", nn::Tensor({1}, 0.0));
  ps.get("a").grad = nn::Tensor({2}, {3.0, 0.0});
  ps.get("b").grad = nn::Tensor({1}, {4.0});
  CHECK(clip_global_norm(ps, 10.0) == doctest::Approx(5.0));
  CHECK((*ps.get("a").grad)[0] == 3.0);
  CHECK(clip_global_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK((*ps.get("a").grad)[0] == doctest::Approx(0.6));
  CHECK((*ps.get("b").grad)[0] == doctest::Approx(0.8));
}

TEST_CASE("training is bit identical across thread counts") {
  auto corpus = tiny_corpus(6, 1);
  TrainConfig one;
  one.epochs = 2;
  one.batch_size = 3;
  auto two = one;
  two.threads = 2;
  const auto a = train::train(tiny_config(), one, tiny_anchors(), corpus);
  const auto b = train::train(tiny_config(), two, tiny_anchors(), corpus);
  CHECK(a.model.params == b.model.params);
  CHECK(a.log.back().loss.total == b.log.back().loss.total);
}

TEST_CASE("resuming from saved state continues bit identically") {
  auto corpus = tiny_corpus(4, 2);
  const auto p = pointers(corpus);
  const std::vector<const Example*> b1{p[0], p[1]}, b2{p[2], p[3]};
  TrainConfig cfg;
  Trainer whole(model::build_model(tiny_config()), cfg, tiny_anchors());
  whole.step(b1);
  whole.step(b2);

  Trainer first(model::build_model(tiny_config()), cfg, tiny_anchors());
  first.step(b1);
  const auto dir = std::filesystem::temp_directory_path();
  model::save_model(dir / "rapnet_resume.ckpt", first.model());
  first.optimizer().save(dir / "rapnet_resume.opt");
  Trainer second(model::load_model(dir / "rapnet_resume.ckpt"), cfg, tiny_anchors());
  second.optimizer().load(dir / "rapnet_resume.opt");
  second.step(b2);
  CHECK(second.model().params == whole.model().params);
}

TEST_CASE("loss decreases on a small learnable corpus") {
  auto corpus = tiny_corpus(16, 3);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 4;
  cfg.learning_rate = 5e-3;
  const auto r = train::train(tiny_config(), cfg, tiny_anchors(), corpus);
  REQUIRE(r.log.size() == 30);
  CHECK(r.log.back().loss.total < r.log.front().loss.total);
  for (const auto& e : r.log) CHECK(std::isfinite(e.loss.total));
}

TEST_CASE("gradient check on the tiny model") {
  auto corpus = tiny_corpus(2, 4);
  const auto r = grad_check(tiny_config(), tiny_anchors(), corpus, 1e-5);
  CHECK(r.checked > 0);
  INFO("worst: " << r.worst_parameter << "[" << r.worst_index << "]");
  CHECK(r.max_relative_error <= 1e-4);
  const auto half = grad_check(tiny_config(), tiny_anchors(), corpus, 5e-6);
  CHECK(half.max_relative_error <= 1e-4);
  const double ratio = (half.max_relative_error + 1e-12) / (r.max_relative_error + 1e-12);
  CHECK(ratio >= 0.1);
  CHECK(ratio <= 10.0);
}

TEST_CASE("gradient check without ground truth") {
  auto corpus = tiny_corpus(1, 5);
  corpus[0].gts.clear();
  const auto r = grad_check(tiny_config(), tiny_anchors(), corpus, 1e-5);
  CHECK(r.max_relative_error <= 1e-4);
}

TEST_CASE("relative error") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == 0.5);
  CHECK(relative_error(1e-9, 0.0) == doctest::Approx(1e-3));
}

TEST_CASE("train config JSON") {
  TrainConfig c;
  c.optimizer = OptimizerKind::kSgdMomentum;
  c.gradient_clip_norm.reset();
  const auto back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(train_config_from_json({{"epochs", 3}, {"nope", 1}}), ConfigError);
  TrainConfig bad;
  bad.learning_rate = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cdfsod/trainer.hpp"

using namespace cdfsod;

namespace {

TrainConfig tiny_cfg() {
  TrainConfig c;
  c.k = 1;
  c.domain = "target_lowcontrast";
  c.burn_in_iters = 4;
  c.distill_iters = 6;
  c.batch_size = 2;
  c.base_iters = 12;
  c.base_images = 20;
  c.pool_images = 30;
  c.test_images = 4;
  c.snapshot_every = 4;
  c.delta = 0.3;
  c.seed = 5;
  return c;
}

const RunEnv& tiny_env() {
  static RunEnv env = prepare_env(tiny_cfg(), builtin_domains());
  return env;
}

double weight_distance(const ModelWeights& a, const ModelWeights& b) {
  double d = 0;
  for (const auto& [name, t] : a.params) {
    const auto& bv = b.params.at(name).values();
    const auto& av = t.values();
    for (size_t i = 0; i < av.size(); ++i) d += (av[i] - bv[i]) * (av[i] - bv[i]);
  }
  return std::sqrt(d);
}

// A model whose objectness is confidently positive everywhere, so pseudo
// labels exist even without training.
ModelWeights confident_model(int n_classes) {
  ModelWeights w = init_detector(n_classes, 31);
  for (double& v : *w.params.at("head_obj.b").data) v = 3.0;
  return w;
}

}  // namespace

TEST_CASE("lambda defaults match the published per-shot choices") {
  CHECK(default_lambda(1) == 4.0);
  CHECK(default_lambda(5) == 3.0);
  CHECK(default_lambda(10) == 4.0);
}

TEST_CASE("config validation rejects out-of-range values") {
  TrainConfig c = tiny_cfg();
  CHECK_NOTHROW(c.validate());
  c.alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_cfg();
  c.delta = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_cfg();
  c.lambda = -0.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_cfg();
  c.k = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_cfg();
  c.gamma = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("ema at alpha one is a fixed point and at alpha zero a copy") {
  ModelWeights teacher = init_detector(3, 1);
  ModelWeights student = init_detector(3, 2);
  ModelWeights frozen = ema_update(teacher, student, 1.0);
  CHECK(weights_equal(frozen, teacher));
  ModelWeights copied = ema_update(teacher, student, 0.0);
  CHECK(weights_equal(copied, student));
  CHECK_THROWS_AS(ema_update(teacher, student, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(ema_update(teacher, student, 1.1), std::invalid_argument);
  ModelWeights other = init_detector(4, 3);
  CHECK_THROWS_AS(ema_update(teacher, other, 0.5), std::invalid_argument);
}

TEST_CASE("ema converges geometrically toward a fixed student") {
  ModelWeights student = init_detector(3, 10);
  ModelWeights teacher = init_detector(3, 11);
  double alpha = 0.9;
  double d0 = weight_distance(teacher, student);
  REQUIRE(d0 > 0);
  for (int n = 1; n <= 25; ++n) {
    teacher = ema_update(teacher, student, alpha);
    double expected = std::pow(alpha, n) * d0;
    CHECK(weight_distance(teacher, student) == Catch::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("duplicate returns two equal independent copies") {
  ModelWeights s = init_detector(2, 9);
  auto [a, b] = duplicate(s);
  CHECK(weights_equal(a, s));
  CHECK(weights_equal(b, s));
  (*a.params.at("conv1.b").data)[0] = 5.0;
  CHECK(weights_equal(b, s));
  CHECK_FALSE(weights_equal(a, s));
}

TEST_CASE("head adaptation keeps everything but the class head") {
  ModelWeights base = init_detector(12, 4);
  ModelWeights adapted = adapt_to_classes(base, 8, 99);
  CHECK(adapted.n_classes == 8);
  for (const auto& [name, t] : adapted.params) {
    if (name.rfind("head_cls", 0) == 0) continue;
    CHECK(t.values() == base.params.at(name).values());
  }
  CHECK(adapted.params.at("head_cls.w").shape == Shape{8, 32, 1, 1});
  ModelWeights again = adapt_to_classes(base, 8, 99);
  CHECK(weights_equal(adapted, again));
}

TEST_CASE("pseudo labels respect the threshold and class-wise nms") {
  ModelWeights teacher = confident_model(3);
  Image img;
  img.h = img.w = 64;
  img.px.assign(3 * 64 * 64, 0.4);
  auto labels = generate_pseudo_labels(teacher, img, 0.25);
  CHECK(!labels.empty());
  for (const PseudoBox& p : labels) {
    CHECK(p.score >= 0.25);
    CHECK(p.box.valid());
    CHECK(p.class_id >= 0);
    CHECK(p.class_id < 3);
  }
  for (size_t i = 0; i < labels.size(); ++i)
    for (size_t j = i + 1; j < labels.size(); ++j)
      if (labels[i].class_id == labels[j].class_id)
        CHECK(iou_boxes(labels[i].box, labels[j].box) <= 0.5);
  auto strict = generate_pseudo_labels(teacher, img, 0.999);
  CHECK(strict.size() <= labels.size());
  CHECK_THROWS_AS(generate_pseudo_labels(teacher, img, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(generate_pseudo_labels(teacher, img, 1.0), std::invalid_argument);
}

TEST_CASE("supervised training reduces the loss on a fixed batch") {
  const RunEnv& env = tiny_env();
  TrainConfig cfg = tiny_cfg();
  cfg.gamma = 0.02;
  ModelWeights w = adapt_to_classes(env.base_model, 3, 1);
  std::vector<LabeledImage> batch{env.support.items.at(0)};
  double first = 0, last = 0;
  for (int it = 0; it < 30; ++it) {
    LossBreakdown lb = train_step(w, nullptr, batch, nullptr, cfg, nullptr);
    if (it == 0) first = lb.total;
    last = lb.total;
  }
  CHECK(last < first);
}

TEST_CASE("loss decomposes into supervised plus weighted distillation") {
  const RunEnv& env = tiny_env();
  TrainConfig cfg = tiny_cfg();
  cfg.lambda = 3.0;
  ModelWeights student = adapt_to_classes(env.base_model, 3, 2);
  ModelWeights teacher = confident_model(3);
  Rng rng(77);
  std::vector<LabeledImage> batch{env.support.items.at(0)};
  for (int it = 0; it < 5; ++it) {
    DistillStepResult r = distill_step(student, teacher, batch, env.target_pool.at(it).image,
                                       cfg, rng);
    const LossBreakdown& lb = r.loss;
    CHECK(std::abs(lb.total - (lb.l_s + cfg.lambda * lb.l_d)) <= 1e-10);
    CHECK(std::abs(lb.l_s - (lb.l_s_cls + lb.l_s_loc)) <= 1e-10);
    CHECK(std::abs(lb.l_d - (lb.l_d_cls + lb.l_d_loc)) <= 1e-10);
    CHECK(lb.n_pseudo >= 0);
    student = r.student;
    teacher = r.teacher;
  }
}

TEST_CASE("distill_step applies ema only when enabled") {
  const RunEnv& env = tiny_env();
  TrainConfig cfg = tiny_cfg();
  ModelWeights student = adapt_to_classes(env.base_model, 3, 3);
  ModelWeights teacher = confident_model(3);
  Rng r1(5), r2(5);

  cfg.ema_enabled = true;
  DistillStepResult with_ema = distill_step(student, teacher, {env.support.items.at(0)},
                                            env.target_pool.at(0).image, cfg, r1);
  ModelWeights expected = ema_update(teacher, with_ema.student, cfg.alpha);
  CHECK(weights_equal(with_ema.teacher, expected));

  cfg.ema_enabled = false;
  DistillStepResult frozen = distill_step(student, teacher, {env.support.items.at(0)},
                                          env.target_pool.at(0).image, cfg, r2);
  CHECK(weights_equal(frozen.teacher, teacher));
  CHECK(weights_equal(frozen.student, with_ema.student));
}

TEST_CASE("teacher never receives gradient and student never copies teacher") {
  const RunEnv& env = tiny_env();
  TrainConfig cfg = tiny_cfg();
  ModelWeights student = adapt_to_classes(env.base_model, 3, 4);
  ModelWeights teacher = confident_model(3);
  ModelWeights teacher_before = teacher.clone();
  Rng rng(9);
  LossBreakdown lb = train_step(student, &teacher, {env.support.items.at(0)},
                                &env.target_pool.at(1).image, cfg, &rng);
  CHECK(weights_equal(teacher, teacher_before));  // train_step never touches it
  CHECK(lb.total > 0);
}

TEST_CASE("freeze_backbone pins conv parameters") {
  const RunEnv& env = tiny_env();
  TrainConfig cfg = tiny_cfg();
  cfg.freeze_backbone = true;
  ModelWeights w = adapt_to_classes(env.base_model, 3, 5);
  ModelWeights before = w.clone();
  train_step(w, nullptr, {env.support.items.at(0)}, nullptr, cfg, nullptr);
  for (const auto& [name, t] : w.params) {
    if (name.rfind("conv", 0) == 0)
      CHECK(t.values() == before.params.at(name).values());
    else
      CHECK(t.values() != before.params.at(name).values());
  }
}

TEST_CASE("base_train with zero iterations returns the initialization") {
  const RunEnv& env = tiny_env();
  ModelWeights w = base_train(env.target_pool, 3, 0, 0.01, 123);
  CHECK(weights_equal(w, init_detector(3, Rng::derive(123, "init"))));
  CHECK_THROWS_AS(base_train({}, 3, 1, 0.01, 1), std::invalid_argument);
}

TEST_CASE("burn_in is deterministic and requires support") {
  const RunEnv& env = tiny_env();
  TrainConfig cfg = tiny_cfg();
  ModelWeights init = adapt_to_classes(env.base_model, 3, 6);
  ModelWeights a = burn_in(init, env.support, cfg);
  ModelWeights b = burn_in(init, env.support, cfg);
  CHECK(weights_equal(a, b));
  CHECK_FALSE(weights_equal(a, init));
  SupportSet empty;
  CHECK_THROWS_AS(burn_in(init, empty, cfg), std::invalid_argument);
}

TEST_CASE("train_full produces the full log and snapshot schedule") {
  const RunEnv& env = tiny_env();
  TrainConfig cfg = tiny_cfg();
  RunArtifacts art = train_full(cfg, env);
  CHECK(int(art.log.size()) == cfg.burn_in_iters + cfg.distill_iters);
  // distill iterations start at global step 5; snapshots at 8 and final 10
  REQUIRE(art.snapshots.size() == 2);
  CHECK(art.snapshots[0].iter == 8);
  CHECK(art.snapshots[1].iter == 10);
  RunArtifacts quiet = train_full(cfg, env, /*with_snapshots=*/false);
  CHECK(quiet.snapshots.empty());
  CHECK(weights_equal(quiet.student, art.student));
  CHECK(weights_equal(quiet.teacher, art.teacher));
}

TEST_CASE("every logged step satisfies the loss decomposition") {
  const RunEnv& env = tiny_env();
  TrainConfig cfg = tiny_cfg();
  RunArtifacts art = train_full(cfg, env, false);
  for (const LossBreakdown& lb : art.log)
    CHECK(std::abs(lb.total - (lb.l_s + cfg.lambda * lb.l_d)) <= 1e-10);
}

TEST_CASE("with zero distill iterations the teacher is the student") {
  const RunEnv& env = tiny_env();
  TrainConfig cfg = tiny_cfg();
  cfg.distill_iters = 0;
  RunArtifacts art = train_full(cfg, env, false);
  CHECK(weights_equal(art.student, art.teacher));
}

TEST_CASE("disabling both mechanisms reproduces naive fine-tuning bit for bit") {
  const RunEnv& env = tiny_env();
  TrainConfig flags_off = tiny_cfg();
  flags_off.ema_enabled = false;
  flags_off.distill_enabled = false;

  TrainConfig naive = method_config(tiny_cfg(), Method::naive_ft);
  REQUIRE(naive.burn_in_iters == flags_off.burn_in_iters + flags_off.distill_iters);
  REQUIRE(naive.distill_iters == 0);

  RunArtifacts a = train_full(flags_off, env, false);
  RunArtifacts b = train_full(naive, env, false);
  CHECK(weights_equal(a.student, b.student));
  // the frozen teacher stays at its duplication point, unlike naive's copy
  CHECK_FALSE(weights_equal(a.teacher, b.teacher));
  CHECK(weights_equal(b.teacher, b.student));
}

TEST_CASE("lambda zero is bit-identical to disabling distillation") {
  const RunEnv& env = tiny_env();
  TrainConfig zero = tiny_cfg();
  zero.lambda = 0.0;
  TrainConfig off = tiny_cfg();
  off.distill_enabled = false;
  RunArtifacts a = train_full(zero, env, false);
  RunArtifacts b = train_full(off, env, false);
  CHECK(weights_equal(a.student, b.student));
  CHECK(weights_equal(a.teacher, b.teacher));
}

TEST_CASE("method configs define the published variants") {
  TrainConfig base = tiny_cfg();
  TrainConfig naive = method_config(base, Method::naive_ft);
  CHECK(naive.burn_in_iters == 10);
  CHECK(naive.distill_iters == 0);
  CHECK_FALSE(naive.ema_enabled);
  CHECK_FALSE(naive.distill_enabled);
  TrainConfig ema = method_config(base, Method::ema_only);
  CHECK(ema.ema_enabled);
  CHECK_FALSE(ema.distill_enabled);
  TrainConfig dis = method_config(base, Method::distill_only);
  CHECK_FALSE(dis.ema_enabled);
  CHECK(dis.distill_enabled);
  TrainConfig full = method_config(base, Method::full);
  CHECK(full.ema_enabled);
  CHECK(full.distill_enabled);
  for (Method m : {Method::naive_ft, Method::ema_only, Method::distill_only, Method::full})
    CHECK(parse_method(method_name(m)) == m);
  CHECK_THROWS_WITH(parse_method("fancy"), Catch::Matchers::ContainsSubstring("ema_only"));
}

TEST_CASE("prepare_env wires the support set to the pool domain") {
  const RunEnv& env = tiny_env();
  CHECK(env.base_domain.name == "base");
  CHECK(env.target_domain.name == "target_lowcontrast");
  CHECK(env.support.k == 1);
  CHECK(env.support.source_domain == "target_lowcontrast");
  CHECK(count_instances(env.support) == 3);  // one per class
  CHECK(env.base_model.n_classes == 12);
  CHECK(int(env.target_test.size()) == tiny_cfg().test_images);
  TrainConfig cached_cfg = tiny_cfg();
  RunEnv cached = prepare_env(cached_cfg, builtin_domains(), &env.base_model);
  CHECK(weights_equal(cached.base_model, env.base_model));
}

// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// Iterative inference, optimizer steps, sampler, checkpoints and fit().

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "../support.hpp"

namespace siplkit {
namespace {

namespace fs = std::filesystem;

using testing::random_image;
using testing::randomize;
using testing::tiny_backbone;
using testing::tiny_model;

Dataset synthetic_dataset(const std::vector<int>& per_task, std::uint64_t seed, int size = 16) {
  const std::vector<std::string> names{"noise25", "rain", "haze"};
  Dataset d;
  for (std::size_t t = 0; t < per_task.size(); ++t) {
    d.task_names.push_back(names[t % names.size()]);
    for (int i = 0; i < per_task[t]; ++i) {
      auto spec = parse_task(names[t % names.size()]);
      spec.seed = derive_seed(seed, "pair", t, static_cast<std::uint64_t>(i));
      Image clean = gen_clean(spec.seed, size, size);
      Image deg = apply_degradation(clean, spec);
      d.pairs.push_back(SamplePair{std::move(clean), std::move(deg), spec, static_cast<int>(t)});
    }
  }
  return d;
}

TrainConfig tiny_train(Regime regime) {
  TrainConfig c;
  c.regime = regime;
  c.epochs = 2;
  c.batch_size = 4;
  c.lr = 1e-3;
  c.backbone = tiny_backbone();
  c.dict_entries = 4;
  return c;
}

Tensor<float> batch_of(std::uint64_t seed, int n, int size = 16) {
  std::vector<Image> imgs;
  for (int i = 0; i < n; ++i) imgs.push_back(random_image(seed + i, size, size));
  return stack_images<float>(imgs);
}

// ---------------------------------------------------------------------------
// Iterative inference

TEST(Inference, TraceLengthAndPsnrLength) {
  Model<float> m(tiny_model(), 1);
  randomize(m.params(), 2, 0.1);
  const auto d = batch_of(10, 2), gt = batch_of(20, 2);
  for (int iters : {0, 1, 3}) {
    InferenceConfig cfg;
    cfg.iters = iters;
    const auto tr = infer_iterative(m, d, cfg, &gt);
    EXPECT_EQ(tr.outputs.size(), static_cast<std::size_t>(iters + 1));
    EXPECT_EQ(tr.per_iter_psnr.size(), static_cast<std::size_t>(iters + 1));
    EXPECT_TRUE(infer_iterative(m, d, cfg).per_iter_psnr.empty());
  }
}

TEST(Inference, NoneModeIsConstantAcrossIterations) {
  Model<float> m(tiny_model(), 1);
  randomize(m.params(), 3, 0.2);
  const auto d = batch_of(30, 2);
  InferenceConfig cfg;
  cfg.iters = 3;
  cfg.pi_mode = PiMode::none;
  const auto tr = infer_iterative(m, d, cfg);
  for (const auto& o : tr.outputs) EXPECT_TRUE(bitwise_equal(o, tr.outputs[0]));
}

TEST(Inference, IterZeroIsSingleForward) {
  Model<float> m(tiny_model(), 1);
  randomize(m.params(), 4, 0.2);
  const auto d = batch_of(40, 1);
  InferenceConfig cfg;
  cfg.iters = 0;
  const auto tr = infer_iterative(m, d, cfg);
  ASSERT_EQ(tr.outputs.size(), 1u);
  EXPECT_TRUE(bitwise_equal(tr.outputs[0], clip01(m.predict(d))));
  cfg.iter0_self_pi = true;
  EXPECT_TRUE(bitwise_equal(infer_iterative(m, d, cfg).outputs[0], clip01(m.predict(d, &d))));
}

TEST(Inference, SelfModeFeedsPreviousOutput) {
  Model<float> m(tiny_model(), 1);
  randomize(m.params(), 5, 0.2);
  const auto d = batch_of(50, 2);
  InferenceConfig cfg;
  cfg.iters = 3;
  const auto tr = infer_iterative(m, d, cfg);
  Tensor<float> cur = clip01(m.predict(d));
  for (int t = 1; t <= 3; ++t) {
    cur = clip01(m.predict(d, &cur));
    EXPECT_TRUE(bitwise_equal(tr.outputs[t], cur)) << t;
  }
  EXPECT_FALSE(bitwise_equal(tr.outputs[1], tr.outputs[0]));
}

TEST(Inference, GroundTruthModeNeedsGroundTruth) {
  Model<float> m(tiny_model(), 1);
  InferenceConfig cfg;
  cfg.pi_mode = PiMode::gt;
  EXPECT_THROW(infer_iterative(m, batch_of(1, 1), cfg), MissingGroundTruth);
  cfg.iters = -1;
  cfg.pi_mode = PiMode::self;
  EXPECT_THROW(infer_iterative(m, batch_of(1, 1), cfg), ConfigError);
}

TEST(Inference, ZeroOutputProjectionMakesGtEqualNone) {
  Model<float> m(tiny_model(), 1);
  randomize(m.params(), 6, 0.2);
  m.params().at("pd.wo").value.fill(0.0f);
  const auto d = batch_of(60, 2), gt = batch_of(70, 2);
  InferenceConfig with_gt, none;
  with_gt.iters = none.iters = 2;
  with_gt.pi_mode = PiMode::gt;
  none.pi_mode = PiMode::none;
  const auto a = infer_iterative(m, d, with_gt, &gt), b = infer_iterative(m, d, none, &gt);
  for (std::size_t i = 0; i < a.outputs.size(); ++i) EXPECT_TRUE(bitwise_equal(a.outputs[i], b.outputs[i]));
  EXPECT_EQ(a.per_iter_psnr, b.per_iter_psnr);
}

TEST(Inference, BaselineIgnoresPi) {
  Model<float> m(tiny_model(Regime::baseline), 1);
  randomize(m.params(), 7, 0.2);
  InferenceConfig cfg;
  cfg.iters = 2;
  const auto tr = infer_iterative(m, batch_of(80, 1), cfg);
  EXPECT_TRUE(bitwise_equal(tr.outputs[2], tr.outputs[0]));
}

TEST(Inference, SingleImageKeepsRank) {
  Model<float> m(tiny_model(), 1);
  const Image img = random_image(90, 16, 16);
  InferenceConfig cfg;
  cfg.iters = 1;
  const auto tr = infer_iterative(m, img, cfg, &img);
  EXPECT_EQ(tr.outputs[1].shape(), img.shape());
  EXPECT_DOUBLE_EQ(tr.per_iter_psnr[0], kPsnrCap);
}

TEST(Inference, OutputsStayInRangeWhenClipped) {
  Model<float> m(tiny_model(), 1);
  randomize(m.params(), 8, 1.0);
  InferenceConfig cfg;
  cfg.iters = 2;
  for (const auto& o : infer_iterative(m, batch_of(100, 2), cfg).outputs) {
    for (float v : o.values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

// ---------------------------------------------------------------------------
// Loss, schedule, optimizer

TEST(Loss, L1Examples) {
  Tape<float> tape(false);
  const auto a = tape.constant(Tensor<float>(Shape{2}, std::vector<float>{0, 1}));
  const auto b = tape.constant(Tensor<float>(Shape{2}, std::vector<float>{1, 1}));
  EXPECT_FLOAT_EQ(loss(a, b).value().item(), 0.5f);
  EXPECT_FLOAT_EQ(loss(a, a).value().item(), 0.0f);
  const auto c = tape.constant(Tensor<float>(Shape{4}, std::vector<float>{-1, 2, 0.5f, 0}));
  const auto z = tape.constant(Tensor<float>(Shape{4}));
  EXPECT_FLOAT_EQ(loss(c, z).value().item(), 0.875f);
}

TEST(LearningRate, CosineEndpointsAndMonotone) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(lr_at(c, 0, 100), c.lr);
  EXPECT_NEAR(lr_at(c, 99, 100), c.lr_min, 1e-15);
  EXPECT_NEAR(lr_at(c, 99, 199), 0.5 * (c.lr + c.lr_min), 1e-15);
  for (int s = 1; s < 100; ++s) EXPECT_LE(lr_at(c, s, 100), lr_at(c, s - 1, 100));
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  ParamStore<float> store;
  store["w"] = Parameter<float>{"w", Tensor<float>(Shape{3}, std::vector<float>{1, 1, 1}), {}, true};
  store["w"].grad = Tensor<float>(Shape{3}, std::vector<float>{2.0f, -0.5f, 0.0f});
  Adam adam(0.9, 0.999, 1e-8);
  adam.step(store, 0.01);
  EXPECT_NEAR(store["w"].value[0], 0.99, 1e-6);
  EXPECT_NEAR(store["w"].value[1], 1.01, 1e-6);
  EXPECT_EQ(store["w"].value[2], 1.0f);
  EXPECT_EQ(adam.steps(), 1);
}

TEST(TrainStep, SmallStepLowersLossOnSameBatch) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto cfg = tiny_train(Regime::baseline);
    cfg.seed = seed;
    Model<float> m(cfg.model_config(), seed);
    randomize(m.params(), 100 + seed, 0.1);
    Adam adam(cfg.beta1, cfg.beta2, cfg.eps);
    const Batch b{batch_of(200 + 4 * seed, 2), batch_of(300 + 4 * seed, 2)};
    const double before = train_step(m, adam, b, cfg, 0, 0, 1e-5).loss;
    const double after = train_step(m, adam, b, cfg, 0, 1, 0.0).loss;
    EXPECT_LT(after, before) << "seed " << seed;
  }
}

TEST(TrainStep, NoPiStepsLeaveDictionaryGradientZero) {
  auto cfg = tiny_train(Regime::sipl);
  cfg.p_nopi = 1.0;
  Model<float> m(cfg.model_config(), 1);
  randomize(m.params(), 2, 0.2);
  Adam adam;
  const Batch b{batch_of(1, 2), batch_of(5, 2)};
  const auto before = m.params().at("pd.matrix").value;
  for (int s = 0; s < 3; ++s) {
    const auto rep = train_step(m, adam, b, cfg, 0, s, 1e-3);
    EXPECT_EQ(rep.mode, StepMode::nopi);
    EXPECT_FALSE(rep.pd_grad_nonzero);
    for (float g : m.params().at("pd.matrix").grad.values()) EXPECT_EQ(g, 0.0f);
  }
  EXPECT_TRUE(bitwise_equal(before, m.params().at("pd.matrix").value));

  cfg.p_nopi = 0.0;
  EXPECT_TRUE(train_step(m, adam, b, cfg, 0, 3, 1e-3).pd_grad_nonzero);
}

TEST(TrainStep, PlWithZeroAlphaMatchesBaseline) {
  auto pl = tiny_train(Regime::pl);
  pl.alpha_schedule.alpha0 = 0.0;
  auto base = tiny_train(Regime::baseline);
  Model<float> mp(pl.model_config(), 9), mb(base.model_config(), 9);
  Adam ap, ab;
  const Batch b{batch_of(11, 2), batch_of(13, 2)};
  for (int s = 0; s < 3; ++s) {
    const auto rp = train_step(mp, ap, b, pl, 0, s, 1e-3);
    const auto rb = train_step(mb, ab, b, base, 0, s, 1e-3);
    EXPECT_EQ(rp.alpha, 0.0);
    EXPECT_EQ(rp.loss, rb.loss);
  }
  for (const auto& [name, p] : mb.params()) EXPECT_TRUE(bitwise_equal(p.value, mp.params().at(name).value)) << name;
}

TEST(TrainStep, NonFiniteInputThrows) {
  auto cfg = tiny_train(Regime::baseline);
  Model<float> m(cfg.model_config(), 1);
  Adam adam;
  Batch b{batch_of(1, 1), batch_of(2, 1)};
  b.degraded[7] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(train_step(m, adam, b, cfg, 0, 0, 1e-3), NonFiniteLoss);
}

TEST(TrainStep, SiplModeFrequencies) {
  auto cfg = tiny_train(Regime::sipl);
  cfg.epochs = 10;
  cfg.p_selfpi = 0.2;
  std::map<StepMode, int> early, late;
  for (int s = 0; s < 5000; ++s) {
    ++early[draw_sipl_mode(cfg, 0, s)];
    ++late[draw_sipl_mode(cfg, 9, s)];
  }
  EXPECT_EQ(early[StepMode::self_pi], 0);
  EXPECT_NEAR(early[StepMode::nopi] / 5000.0, 0.3, 0.025);
  EXPECT_NEAR(late[StepMode::self_pi] / 5000.0, 0.2, 0.025);
  EXPECT_NEAR(late[StepMode::gt_pi] / 5000.0, 0.5, 0.025);
}

// ---------------------------------------------------------------------------
// Sampler

TEST(Sampler, RoundRobinBalanceAndDeterminism) {
  const Dataset d = synthetic_dataset({5, 9, 12}, 1);
  for (int epoch = 0; epoch < 4; ++epoch) {
    const auto order = epoch_order(d, 3, epoch);
    ASSERT_EQ(order.size(), d.pairs.size());
    std::vector<int> count(3, 0);
    for (std::size_t i = 0; i < order.size(); ++i) {
      ASSERT_LT(order[i], d.pairs.size());
      ++count[static_cast<std::size_t>(d.pairs[order[i]].task_id)];
      const auto [lo, hi] = std::minmax_element(count.begin(), count.end());
      EXPECT_LE(*hi - *lo, 1) << "prefix " << i;
    }
    EXPECT_EQ(order, epoch_order(d, 3, epoch));
  }
  EXPECT_NE(epoch_order(d, 3, 0), epoch_order(d, 3, 1));
  EXPECT_NE(epoch_order(d, 3, 0), epoch_order(d, 4, 0));
}

TEST(Sampler, EqualPoolsArePermutations) {
  const Dataset d = synthetic_dataset({6, 6}, 2);
  auto order = epoch_order(d, 0, 0);
  std::sort(order.begin(), order.end());
  for (std::size_t i = 0; i < order.size(); ++i) EXPECT_EQ(order[i], i);
}

// ---------------------------------------------------------------------------
// Checkpoints and fit

TEST(Checkpoint, ByteRoundTrip) {
  auto cfg = tiny_train(Regime::sipl);
  Model<float> m(cfg.model_config(), 3);
  randomize(m.params(), 4);
  Adam adam;
  train_step(m, adam, Batch{batch_of(1, 2), batch_of(3, 2)}, cfg, 0, 0, 1e-3);
  Checkpoint c = make_checkpoint(m, &adam, cfg, 1, 1);
  c.meta = {{"best_epoch", 0}, {"best_val_psnr", 21.5}};
  const std::string bytes = c.serialize();
  const Checkpoint back = Checkpoint::deserialize(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.epoch, 1);
  EXPECT_EQ(back.step, 1);
  EXPECT_EQ(back.meta, c.meta);
  EXPECT_EQ(to_json(back.config), to_json(cfg));
  EXPECT_TRUE(back.tensors.contains("adam.m.pd.matrix"));
  EXPECT_TRUE(back.tensors.contains("adam.v.backbone.out.weight"));

  auto restored = model_from_checkpoint(back);
  for (const auto& [name, p] : m.params()) EXPECT_TRUE(bitwise_equal(p.value, restored->params().at(name).value));
}

TEST(Checkpoint, CorruptInputIsIoError) {
  auto cfg = tiny_train(Regime::baseline);
  Model<float> m(cfg.model_config(), 3);
  const std::string bytes = make_checkpoint(m, nullptr, cfg, 0, 0).serialize();
  EXPECT_THROW(Checkpoint::deserialize(bytes.substr(0, bytes.size() - 4)), IoError);
  EXPECT_THROW(Checkpoint::deserialize(bytes.substr(0, 5)), IoError);
  std::string bad = bytes;
  bad[9] = '!';
  EXPECT_THROW(Checkpoint::deserialize(bad), IoError);
  EXPECT_THROW(Checkpoint::load("/nonexistent/siplkit.ckpt"), IoError);
}

TEST(Fit, ZeroEpochsReturnsInitialization) {
  auto cfg = tiny_train(Regime::sipl);
  cfg.epochs = 0;
  const auto r = fit(cfg, synthetic_dataset({4, 4}, 5), Dataset{});
  Model<float> init(cfg.model_config(), cfg.seed);
  for (const auto& [name, p] : init.params()) EXPECT_TRUE(bitwise_equal(p.value, r.final_checkpoint.tensors.at(name))) << name;
  EXPECT_TRUE(r.steps.empty());
}

TEST(Fit, DeterministicAndWritesArtifacts) {
  const auto train = synthetic_dataset({6, 6}, 6), val = synthetic_dataset({2, 2}, 7);
  auto cfg = tiny_train(Regime::sipl);
  cfg.p_selfpi = 0.3;
  const fs::path dir = fs::temp_directory_path() / "siplkit_test_fit";
  fs::remove_all(dir);
  FitOptions opt;
  opt.out_dir = dir;
  const auto a = fit(cfg, train, val, opt);
  const auto b = fit(cfg, train, val);
  EXPECT_EQ(a.final_checkpoint.hash(), b.final_checkpoint.hash());
  EXPECT_EQ(a.steps.size(), 6u);
  EXPECT_EQ(a.validation.size(), 2u);
  ASSERT_TRUE(a.best_checkpoint.has_value());
  for (const char* f : {"final.ckpt", "best.ckpt", "train_log.jsonl", "val_log.jsonl"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(Checkpoint::load(dir / "final.ckpt").hash(), a.final_checkpoint.hash());
  EXPECT_EQ(Checkpoint::load(dir / "best.ckpt").hash(), a.best_checkpoint->hash());

  auto other = cfg;
  other.seed = 1;
  EXPECT_NE(fit(other, train, val).final_checkpoint.hash(), a.final_checkpoint.hash());
  fs::remove_all(dir);
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
  const auto train = synthetic_dataset({5, 5}, 8);
  auto cfg = tiny_train(Regime::sipl);
  cfg.epochs = 3;
  const auto full = fit(cfg, train, Dataset{});

  // Replay the first epoch by hand, then hand the state to fit().
  Model<float> m(cfg.model_config(), cfg.seed);
  Adam adam(cfg.beta1, cfg.beta2, cfg.eps);
  const std::int64_t per_epoch = 3, total = per_epoch * cfg.epochs;
  const auto order = epoch_order(train, cfg.seed, 0);
  std::int64_t step = 0;
  for (std::size_t start = 0; start < order.size(); start += 4, ++step) {
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + 4)));
    train_step(m, adam, make_batch(train, idx), cfg, 0, step, lr_at(cfg, step, total));
  }
  ASSERT_EQ(step, per_epoch);
  Checkpoint mid = make_checkpoint(m, &adam, cfg, 1, step);
  mid.meta = {{"best_epoch", -1}};
  const Checkpoint mid_loaded = Checkpoint::deserialize(mid.serialize());
  FitOptions opt;
  opt.resume = &mid_loaded;
  const auto resumed = fit(cfg, train, Dataset{}, opt);
  EXPECT_EQ(resumed.final_checkpoint.hash(), full.final_checkpoint.hash());

  auto changed = cfg;
  changed.lr = 5e-4;
  EXPECT_THROW(fit(changed, train, Dataset{}, opt), ConfigError);
}

TEST(Fit, PlAlphaFollowsSchedule) {
  auto cfg = tiny_train(Regime::pl);
  cfg.epochs = 5;
  const auto r = fit(cfg, synthetic_dataset({4, 4}, 9), Dataset{});
  for (const auto& s : r.steps) {
    EXPECT_EQ(s.mode, StepMode::blend);
    EXPECT_DOUBLE_EQ(s.alpha, alpha_at(cfg.alpha_schedule, s.epoch, cfg.epochs));
  }
  EXPECT_DOUBLE_EQ(r.steps.front().alpha, 0.9);
  EXPECT_EQ(r.steps.back().alpha, 0.0);
}

TEST(Fit, EmptyTrainingSplitIsConfigError) {
  EXPECT_THROW(fit(tiny_train(Regime::baseline), Dataset{}, Dataset{}), ConfigError);
}

}  // namespace
}  // namespace siplkit

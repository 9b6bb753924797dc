// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "../support.hpp"

namespace siplkit {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("siplkit_test_" + name);
  fs::remove_all(p);
  return p;
}

bool in_unit_range(const Image& img) {
  for (float v : img.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) return false;
  }
  return true;
}

TEST(GenClean, ShapeRangeAndDeterminism) {
  const Image a = gen_clean(1, 64, 64);
  EXPECT_EQ(a.shape(), (Shape{64, 64, 3}));
  EXPECT_TRUE(in_unit_range(a));
  EXPECT_TRUE(bitwise_equal(a, gen_clean(1, 64, 64)));
  EXPECT_FALSE(bitwise_equal(a, gen_clean(2, 64, 64)));
}

TEST(GenClean, RejectsTinyImages) { EXPECT_THROW(gen_clean(1, 15, 64), ShapeError); }

TEST(GenClean, PixelSpreadOverHundredSeeds) {
  double total = 0.0;
  for (std::uint64_t s = 1; s <= 100; ++s) {
    const double sd = detail::image_std(gen_clean(s, 64, 64));
    EXPECT_GE(sd, 0.05) << "seed " << s;
    total += sd;
  }
  EXPECT_GE(total / 100.0, 0.05);
}

TEST(Degrade, NoiseStdOnMidGray) {
  const Image gray(Shape{64, 64, 3}, 0.5f);
  const Image noisy = add_gaussian_noise_unclipped(gray, 25.0, 11);
  double m = 0.0, v = 0.0;
  for (float x : noisy.values()) m += x;
  m /= static_cast<double>(noisy.size());
  for (float x : noisy.values()) v += (x - m) * (x - m);
  const double sd = std::sqrt(v / static_cast<double>(noisy.size()));
  EXPECT_NEAR(sd, 25.0 / 255.0, 0.002);
}

TEST(Degrade, NoisePsnrMatchesClosedForm) {
  const Image gray(Shape{64, 64, 3}, 0.5f);
  DegradationSpec spec = parse_task("noise25");
  spec.seed = 3;
  const double expected = 20.0 * std::log10(255.0 / 25.0);
  EXPECT_NEAR(psnr(apply_degradation(gray, spec), gray), expected, 0.3);
  // Low-contrast procedural image: clipping is rare, so the closed form still holds.
  Image soft = gen_clean(5, 64, 64);
  for (auto& x : soft.values()) x = 0.35f + 0.3f * x;
  EXPECT_NEAR(psnr(apply_degradation(soft, spec), soft), expected, 0.5);
}

TEST(Degrade, ZeroScatteringHazeIsIdentity) {
  const Image clean = gen_clean(4, 32, 32);
  DegradationSpec spec = parse_task("haze");
  spec.params.haze.beta = 0.0;
  spec.seed = 9;
  EXPECT_TRUE(bitwise_equal(apply_degradation(clean, spec), clean));
}

TEST(Degrade, IdentityLowlight) {
  const Image clean = gen_clean(4, 32, 32);
  DegradationSpec spec = parse_task("low");
  spec.params.lowlight.gamma = 1.0;
  spec.params.lowlight.scale = 1.0;
  EXPECT_TRUE(bitwise_equal(apply_degradation(clean, spec), clean));
}

TEST(Degrade, LowlightClosedForm) {
  const Image gray(Shape{16, 16, 3}, 0.5f);
  DegradationSpec spec = parse_task("low");
  const auto out = apply_degradation(gray, spec);
  const double expect = std::pow(0.5 * spec.params.lowlight.scale, spec.params.lowlight.gamma);
  EXPECT_NEAR(out[0], expect, 1e-6);
}

TEST(Degrade, EveryKindAndCompositeStaysInRange) {
  for (std::uint64_t s = 0; s < 6; ++s) {
    const Image clean = gen_clean(100 + s, 32, 48);
    for (auto spec : cdd11_tasks()) {
      spec.seed = s;
      const Image out = apply_degradation(clean, spec);
      EXPECT_EQ(out.shape(), clean.shape());
      EXPECT_TRUE(in_unit_range(out)) << spec.name();
    }
    for (const char* t : {"noise15", "noise50", "rain+noise25", "snow+noise50"}) {
      auto spec = parse_task(t);
      spec.seed = s;
      EXPECT_TRUE(in_unit_range(apply_degradation(clean, spec))) << t;
    }
  }
}

TEST(Degrade, SeedReproducibleAndSeedSensitive) {
  const Image clean = gen_clean(7, 32, 32);
  auto spec = parse_task("haze+rain");
  spec.seed = 42;
  const Image a = apply_degradation(clean, spec);
  EXPECT_TRUE(bitwise_equal(a, apply_degradation(clean, spec)));
  spec.seed = 43;
  EXPECT_FALSE(bitwise_equal(a, apply_degradation(clean, spec)));
}

TEST(Degrade, ListedOrderIsAppliedOrder) {
  const Image clean = gen_clean(8, 32, 32);
  auto a = parse_task("low+haze");
  auto b = parse_task("haze+low");
  a.seed = b.seed = 5;
  const Image x = apply_degradation(clean, a), y = apply_degradation(clean, b);
  EXPECT_FALSE(bitwise_equal(x, y));
  // Sequential application by hand reproduces the composite.
  auto low = parse_task("low"), haze = parse_task("haze");
  low.seed = haze.seed = 5;
  Image manual = clean;
  detail::apply_lowlight(manual, low.params.lowlight);
  manual = clip01(std::move(manual));
  Rng r1(derive_seed(5, "haze", 1));
  detail::apply_haze(manual, haze.params.haze, r1);
  manual = clip01(std::move(manual));
  EXPECT_TRUE(bitwise_equal(manual, x));
}

TEST(Degrade, ParsingAndValidation) {
  EXPECT_THROW(parse_task("fog"), UnknownKind);
  EXPECT_THROW(parse_task("noise30"), ConfigError);
  EXPECT_THROW(parse_task("rain+rain"), ConfigError);
  EXPECT_EQ(parse_task("rain+noise50").name(), "rain+noise50");
  EXPECT_EQ(parse_task_list("noise25,rain").size(), 2u);
  const auto cdd = parse_task_list("cdd11");
  ASSERT_EQ(cdd.size(), 11u);
  const std::vector<std::string> expected{"low",      "haze",      "rain",      "snow",          "low+haze",     "low+rain",
                                          "low+snow", "haze+rain", "haze+snow", "low+haze+rain", "low+haze+snow"};
  for (std::size_t i = 0; i < 11; ++i) EXPECT_EQ(cdd[i].name(), expected[i]);
}

TEST(Degrade, SpecJsonRoundTrip) {
  auto spec = parse_task("low+haze+snow");
  spec.params.haze.beta = 0.7;
  spec.seed = 99;
  nlohmann::json kinds = nlohmann::json::array();
  for (Kind k : spec.kinds) kinds.push_back(std::string(kind_name(k)));
  const auto back = spec_from_json(kinds, params_to_json(spec), spec.seed);
  EXPECT_EQ(back.name(), spec.name());
  EXPECT_EQ(back.params.haze.beta, 0.7);
  EXPECT_EQ(back.seed, 99u);
}

TEST(Corpus, CountsLayoutAndDeterminism) {
  const auto dir = scratch("corpus_a");
  CorpusOptions opt;
  opt.out_dir = dir;
  opt.height = opt.width = 32;
  const auto tasks = parse_task_list("noise25,rain");
  const auto m = build_corpus(tasks, 8, 3, opt);
  EXPECT_EQ(m.entries.size(), 16u);
  int pngs = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 32);
  EXPECT_TRUE(fs::exists(dir / "manifest.jsonl"));

  const auto dir2 = scratch("corpus_b");
  opt.out_dir = dir2;
  const auto m2 = build_corpus(tasks, 8, 3, opt);
  EXPECT_EQ(m.serialize(), m2.serialize());
  EXPECT_EQ(m.hash(), m2.hash());

  std::set<std::uint64_t> seeds;
  std::set<std::string> splits;
  for (const auto& e : m.entries) {
    seeds.insert(e.spec.seed);
    splits.insert(e.split);
  }
  EXPECT_EQ(seeds.size(), 16u);
  EXPECT_EQ(splits, (std::set<std::string>{"train", "val", "test"}));

  const auto loaded = load_manifest(dir);
  EXPECT_EQ(loaded.serialize(), m.serialize());
  EXPECT_EQ(loaded.task_names, m.task_names);
  const auto train = load_split(loaded, "train");
  ASSERT_FALSE(train.empty());
  EXPECT_EQ(train[0].clean.shape(), (Shape{32, 32, 3}));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(Corpus, ElevenTaskIds) {
  const auto dir = scratch("corpus_cdd");
  CorpusOptions opt;
  opt.out_dir = dir;
  opt.height = opt.width = 16;
  const auto m = build_corpus(cdd11_tasks(), 2, 1, opt);
  std::set<int> ids;
  for (const auto& e : m.entries) ids.insert(e.task_id);
  EXPECT_EQ(ids.size(), 11u);
  EXPECT_EQ(m.task_names.front(), "low");
  EXPECT_EQ(m.task_names.back(), "low+haze+snow");
  fs::remove_all(dir);
}

TEST(Corpus, SplitCountsFor124) {
  const auto c = split_counts(124, 0.1, 0.1);
  EXPECT_EQ(c.train, 100);
  EXPECT_EQ(c.val, 12);
  EXPECT_EQ(c.test, 12);
}

TEST(Corpus, UnwritableDestinationIsIoError) {
  CorpusOptions opt;
  opt.out_dir = "/proc/siplkit_cannot_write_here";
  EXPECT_THROW(build_corpus(parse_task_list("rain"), 1, 1, opt), IoError);
}

TEST(Png, RoundTripIsExactOnQuantizedValues) {
  const auto dir = scratch("png");
  fs::create_directories(dir);
  Image img(Shape{5, 7, 3});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i % 256) / 255.0f;
  write_png(dir / "x.png", img);
  EXPECT_TRUE(bitwise_equal(read_png(dir / "x.png"), img));
  EXPECT_THROW(read_png(dir / "missing.png"), IoError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace siplkit

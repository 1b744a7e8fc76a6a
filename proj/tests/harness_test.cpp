#include "rns/harness.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace rns {
namespace {

TEST(GenerateWorld, PerfectAlignmentGivesPerfectZeroShot) {
  SynthConfig cfg;
  cfg.feature_noise = 0;
  cfg.text_misalignment = 0;
  const SynthWorld w = generate_world(cfg);
  EXPECT_DOUBLE_EQ(evaluate_zero_shot(w, w.text, 0.1).miou, 1.0);
}

TEST(GenerateWorld, TwoClassesInTwoDimensionsAreOrthogonal) {
  SynthConfig cfg;
  cfg.num_classes = 2;
  cfg.dim = 2;
  cfg.cluster_separation = std::numbers::pi / 2;
  cfg.max_classes_per_image = 2;
  const SynthWorld w = generate_world(cfg);
  EXPECT_NEAR(w.centroids.row(0).dot(w.centroids.row(1)), 0.0, 1e-12);
}

TEST(GenerateWorld, MinimumAngleHolds) {
  for (double sep : {0.3, std::numbers::pi / 4, 1.2}) {
    for (std::size_t d : {4u, 16u}) {
      SynthConfig cfg;
      cfg.dim = d;
      cfg.num_classes = 6;
      cfg.cluster_separation = sep;
      const SynthWorld w = generate_world(cfg);
      for (int a = 0; a < 6; ++a) {
        EXPECT_NEAR(w.centroids.row(a).norm(), 1.0, 1e-12);
        EXPECT_NEAR(w.text.features.row(a).norm(), 1.0, 1e-12);
        EXPECT_NEAR(std::acos(std::clamp(w.centroids.row(a).dot(w.text.features.row(a)), -1.0, 1.0)),
                    cfg.text_misalignment, 1e-9);
        for (int b = 0; b < a; ++b)
          EXPECT_GE(std::acos(std::clamp(w.centroids.row(a).dot(w.centroids.row(b)), -1.0, 1.0)), sep - 1e-9);
      }
    }
  }
}

TEST(GenerateWorld, InfeasibleSeparation) {
  SynthConfig cfg;
  cfg.num_classes = 3;
  cfg.dim = 8;
  cfg.cluster_separation = 2.2;  // beyond the 120 degree simplex limit
  try {
    generate_world(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InfeasibleSeparation);
  }
}

TEST(GenerateWorld, Deterministic) {
  SynthConfig cfg;
  cfg.seed = 42;
  const SynthWorld a = generate_world(cfg), b = generate_world(cfg);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.text.features, b.text.features);
  ASSERT_EQ(a.support.size(), b.support.size());
  for (std::size_t i = 0; i < a.support.size(); ++i) {
    EXPECT_EQ(a.support[i].features.data, b.support[i].features.data);
    EXPECT_TRUE((a.support[i].mask.data == b.support[i].mask.data).all());
  }
  EXPECT_EQ(a.class_order, b.class_order);
}

TEST(GenerateWorld, BlockMasksAlignWithPatches) {
  const SynthWorld w = generate_world({});
  for (const SynthImage& img : w.queries) {
    const PatchLabelMatrix p = downsample_labels(img.mask, img.features.grid_h, img.features.grid_w);
    // Every patch cell is pure: each row has exactly one nonzero entry.
    for (Eigen::Index j = 0; j < p.data.rows(); ++j) EXPECT_EQ((p.data.row(j).array() > 0).count(), 1);
  }
}

TEST(SampleSupport, EveryClassReachesB) {
  SynthConfig cfg;
  cfg.pool_images_per_class = 12;
  const SynthWorld w = generate_world(cfg);
  for (std::size_t B : {1u, 2u, 5u}) {
    std::mt19937_64 rng(7);
    const auto support = sample_support(w.pool, cfg.num_classes, B, rng);
    std::vector<std::size_t> seen(cfg.num_classes, 0);
    std::set<std::uint64_t> ids;
    for (const SynthImage& img : support) {
      ids.insert(img.image_id);
      for (ClassId c : img.classes) ++seen[c];
    }
    EXPECT_EQ(ids.size(), support.size());
    for (std::size_t c = 0; c < cfg.num_classes; ++c) EXPECT_GE(seen[c], B);
  }
}

LabelMask grid_of(std::initializer_list<int> v, std::size_t C) {
  LabelMask m{LabelGrid(4, 4), kDefaultIgnore, C};
  auto it = v.begin();
  for (Eigen::Index i = 0; i < 16; ++i, ++it)
    m.data.data()[i] = *it < 0 ? kDefaultIgnore : static_cast<std::uint16_t>(*it);
  return m;
}

TEST(ComputeMiou, HandCountedConfusion) {
  // class 0: TP 4, FP 2, FN 2; class 1: TP 6, FP 2, FN 2; two ignore pixels.
  const LabelMask gt = grid_of({0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, -1, -1}, 2);
  const LabelMask pr = grid_of({0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1, 0, 1}, 2);
  const IoUReport r = compute_miou({pr}, {gt}, 2);
  EXPECT_EQ(r.true_positive, (std::vector<std::uint64_t>{4, 6}));
  EXPECT_EQ(r.false_positive, (std::vector<std::uint64_t>{2, 2}));
  EXPECT_EQ(r.false_negative, (std::vector<std::uint64_t>{2, 2}));
  EXPECT_NEAR(r.per_class_iou[0], 0.5, 1e-12);
  EXPECT_NEAR(r.per_class_iou[1], 0.6, 1e-12);
  EXPECT_NEAR(r.mean_iou, 0.55, 1e-12);
}

TEST(ComputeMiou, IdentityAndDisjoint) {
  std::mt19937_64 rng(1);
  const LabelMask m = testing::random_mask(8, 8, 4, rng, 0.1);
  EXPECT_DOUBLE_EQ(compute_miou({m}, {m}, 4).mean_iou, 1.0);

  const LabelMask zeros{LabelGrid::Zero(3, 3), kDefaultIgnore, 2};
  const LabelMask ones{LabelGrid::Ones(3, 3), kDefaultIgnore, 2};
  const IoUReport r = compute_miou({zeros}, {ones}, 2);
  EXPECT_DOUBLE_EQ(r.per_class_iou[0], 0.0);
  EXPECT_DOUBLE_EQ(r.per_class_iou[1], 0.0);
}

TEST(ComputeMiou, EmptyUnionExcluded) {
  const LabelMask m{LabelGrid::Zero(2, 2), kDefaultIgnore, 3};
  const IoUReport r = compute_miou({m}, {m}, 3);
  EXPECT_EQ(r.evaluated, (std::vector<bool>{true, false, false}));
  EXPECT_DOUBLE_EQ(r.mean_iou, 1.0);
}

TEST(ComputeMiou, IgnorePixelsDoNotMatter) {
  std::mt19937_64 rng(2);
  const LabelMask gt = testing::random_mask(10, 10, 3, rng, 0.3);
  LabelMask pred = gt;
  for (Eigen::Index i = 0; i < gt.data.size(); ++i)
    if (gt.data.data()[i] == kDefaultIgnore) pred.data.data()[i] = static_cast<std::uint16_t>(i % 3);
  EXPECT_DOUBLE_EQ(compute_miou({pred}, {gt}, 3).mean_iou, 1.0);
}

TEST(ComputeMiou, PermutationInvariantAndMeanOfEvaluated) {
  std::mt19937_64 rng(3);
  std::vector<LabelMask> preds, gts;
  for (int i = 0; i < 6; ++i) {
    preds.push_back(testing::random_mask(6, 7, 5, rng));
    gts.push_back(testing::random_mask(6, 7, 5, rng, 0.1));
  }
  const IoUReport a = compute_miou(preds, gts, 5);
  std::vector<std::size_t> order{3, 0, 5, 1, 4, 2};
  std::vector<LabelMask> p2, g2;
  for (std::size_t i : order) p2.push_back(preds[i]), g2.push_back(gts[i]);
  const IoUReport b = compute_miou(p2, g2, 5);
  EXPECT_EQ(a.per_class_iou, b.per_class_iou);
  double sum = 0;
  int n = 0;
  for (int c = 0; c < 5; ++c)
    if (a.evaluated[c]) sum += a.per_class_iou[c], ++n;
  EXPECT_NEAR(a.mean_iou, sum / n, 1e-9);
}

TEST(ComputeMiou, ShapeMismatch) {
  const LabelMask a{LabelGrid::Zero(2, 2), kDefaultIgnore, 1};
  const LabelMask b{LabelGrid::Zero(2, 3), kDefaultIgnore, 1};
  EXPECT_THROW(compute_miou({a}, {b}, 1), Error);
}

TEST(DroppedClasses, PrefixOfPermutation) {
  const SynthWorld w = generate_world({});
  EXPECT_TRUE(dropped_classes(w, 0.0).empty());
  const auto half = dropped_classes(w, 0.5);
  EXPECT_EQ(half.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(half.contains(w.class_order[i]));
  EXPECT_EQ(dropped_classes(w, 1.0).size(), 10u);
}

TEST(BuildStore, HiddenClassesAbsent) {
  const SynthWorld w = generate_world({});
  const std::set<ClassId> hidden{1, 4};
  const SupportStore s = build_store(w.support, 10, 16, hidden);
  EXPECT_EQ(s.class_counts()[1], 0u);
  EXPECT_EQ(s.class_counts()[4], 0u);
  EXPECT_GT(s.class_counts()[0], 0u);
}

TEST(RunSweep, DeterministicAndTable) {
  SynthConfig cfg;
  cfg.query_images = 3;
  const SynthWorld w = generate_world(cfg);
  TrainConfig tc;
  tc.steps = 60;
  const auto a = run_sweep(w, SweepAxis::TextDropFraction, {0.0, 1.0}, tc);
  const auto b = run_sweep(w, SweepAxis::TextDropFraction, {0.0, 1.0}, tc);
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].rns_miou, b[i].rns_miou);
    EXPECT_EQ(a[i].zero_shot_miou, b[i].zero_shot_miou);
    EXPECT_GE(a[i].rns_miou, 0.0);
    EXPECT_LE(a[i].rns_miou, 1.0);
  }
  std::ostringstream os;
  write_sweep_table(os, SweepAxis::TextDropFraction, a);
  const std::string table = os.str();
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
  EXPECT_EQ(table.rfind("text_drop_fraction", 0), 0u);
}

TEST(DropText, AllDroppedFallsBack) {
  const SynthWorld w = generate_world({});
  std::set<ClassId> all;
  for (ClassId c = 0; c < 10; ++c) all.insert(c);
  const TextBank b = drop_text(w.text, all);
  EXPECT_TRUE(b.all_absent);
  const TextBank some = drop_text(w.text, {2});
  EXPECT_FALSE(some.present[2]);
  EXPECT_TRUE(some.materialized());
}

}  // namespace
}  // namespace rns

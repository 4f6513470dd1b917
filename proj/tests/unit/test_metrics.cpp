#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cilmp/errors.hpp"
#include "cilmp/metrics.hpp"
#include "cilmp/rng.hpp"
#include "oracles.hpp"

using namespace cilmp;

namespace {

EvalBatch labels(std::vector<int> t, std::vector<int> p, std::size_t c = 2) {
  EvalBatch b;
  b.y_true = std::move(t);
  b.y_pred = std::move(p);
  b.num_classes = c;
  return b;
}

// One-hot-ish score rows whose argmax is the given prediction.
EvalBatch scored(std::vector<int> t, const std::vector<int>& p, std::size_t c) {
  std::vector<std::vector<double>> s;
  for (int y : p) {
    std::vector<double> row(c, 0.1 / static_cast<double>(c - 1));
    row[static_cast<std::size_t>(y)] = 0.9;
    s.push_back(row);
  }
  return EvalBatch::from_scores(std::move(t), std::move(s));
}

EvalBatch permuted(const EvalBatch& b, Rng& rng) {
  std::vector<std::size_t> idx(b.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  rng.shuffle(idx);
  std::vector<int> t;
  std::vector<std::vector<double>> s;
  for (std::size_t i : idx) {
    t.push_back(b.y_true[i]);
    s.push_back(b.y_score[i]);
  }
  return EvalBatch::from_scores(std::move(t), std::move(s));
}

}  // namespace

TEST(Accuracy, Examples) {
  EXPECT_EQ(accuracy(labels({0, 1, 1}, {0, 1, 1})), 1.0);
  EXPECT_EQ(accuracy(labels({0, 1, 1}, {1, 0, 0})), 0.0);
  EXPECT_EQ(accuracy(labels({0, 0, 1, 1}, {0, 1, 1, 1})), 0.75);
  EXPECT_THROW(accuracy(labels({}, {})), DimensionError);
}

TEST(MacroF1, Examples) {
  EXPECT_EQ(macro_f1(labels({0, 1, 2, 1}, {0, 1, 2, 1}, 3)), 1.0);
  EXPECT_NEAR(macro_f1(labels({0, 0, 1, 1}, {0, 0, 0, 0})), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(macro_f1(labels({2, 2, 2}, {2, 2, 2}, 4)), 1.0);
  EXPECT_THROW(macro_f1(labels({}, {})), DimensionError);
}

TEST(MacroF1, ThreeClassConfusionMatrix) {
  // truth 0: 0,0,1   truth 1: 1,2   truth 2: 2,2,0
  // class0 tp=2 fp=1 fn=1 -> 2/3; class1 tp=1 fp=1 fn=1 -> 1/2; class2 tp=2 fp=1 fn=1 -> 2/3
  const EvalBatch b = labels({0, 0, 0, 1, 1, 2, 2, 2}, {0, 0, 1, 1, 2, 2, 2, 0}, 3);
  EXPECT_NEAR(macro_f1(b), (2.0 / 3 + 0.5 + 2.0 / 3) / 3, 1e-15);
  EXPECT_EQ(accuracy(b), 5.0 / 8);
}

TEST(MacroF1, ClassOnlyPredictedCountsAsZero) {
  // class 1 never true but predicted once -> F1 0; class 2 absent everywhere -> skipped
  EXPECT_NEAR(macro_f1(labels({0, 0}, {0, 1}, 3)), (2.0 / 3 + 0.0) / 2, 1e-15);
}

TEST(MacroAuc, Examples) {
  EXPECT_EQ(macro_ovr_auc(EvalBatch::from_scores({0, 1}, {{0.8, 0.2}, {0.1, 0.9}})), 1.0);
  EXPECT_EQ(macro_ovr_auc(EvalBatch::from_scores({1, 0}, {{0.8, 0.2}, {0.1, 0.9}})), 0.0);
  EXPECT_EQ(macro_ovr_auc(EvalBatch::from_scores({0, 1, 1, 0}, std::vector<std::vector<double>>(4, {0.5, 0.5}))),
            0.5);
  // perfectly ordered 3-class scores
  EXPECT_EQ(macro_ovr_auc(scored({0, 1, 2, 0, 1, 2}, {0, 1, 2, 0, 1, 2}, 3)), 1.0);
}

TEST(MacroAuc, SkipsClassesWithoutPositives) {
  const EvalBatch b = EvalBatch::from_scores({0, 1}, {{0.6, 0.3, 0.1}, {0.2, 0.7, 0.1}});
  const AucResult r = macro_ovr_auc_detail(b);
  EXPECT_EQ(r.skipped_classes, std::vector<std::size_t>{2});
  EXPECT_EQ(r.value, 1.0);
  EXPECT_THROW(macro_ovr_auc(EvalBatch::from_scores({0, 0}, {{0.6, 0.4}, {0.7, 0.3}})), UndefinedMetricError);
}

TEST(MacroAuc, EqualsPairwiseOracle) {
  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.index(199);
    const std::size_t c = 2 + rng.index(4);
    const EvalBatch b = oracles::random_batch(rng, n, c);
    EXPECT_EQ(macro_ovr_auc(b), oracles::pairwise_macro_auc(b)) << "batch " << t;
  }
}

TEST(MacroAuc, BinaryComplement) {
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    EvalBatch b = oracles::random_batch(rng, 30, 2);
    if (std::count(b.y_true.begin(), b.y_true.end(), 0) % 30 == 0) continue;
    const double auc = macro_ovr_auc(b);
    for (int& y : b.y_true) y = 1 - y;
    EXPECT_NEAR(macro_ovr_auc(b), 1.0 - auc, 1e-15);
  }
}

TEST(Kappa, Examples) {
  EXPECT_EQ(cohen_kappa(labels({0, 1, 0, 1}, {0, 1, 0, 1})), 1.0);
  EXPECT_EQ(cohen_kappa(labels({0, 0, 1, 1}, {0, 0, 0, 0})), 0.0);
  EXPECT_EQ(cohen_kappa(labels({0, 0, 1, 1}, {0, 1, 0, 1})), 0.0);
  EXPECT_THROW(cohen_kappa(labels({}, {})), DimensionError);
}

TEST(Kappa, ThreeClassConfusionMatrix) {
  // rows truth, cols pred: [[2,1,0],[0,1,1],[1,0,2]]; p_o = 5/8
  // marginals truth (3,2,3), pred (3,2,3): p_e = (9+4+9)/64
  const EvalBatch b = labels({0, 0, 0, 1, 1, 2, 2, 2}, {0, 0, 1, 1, 2, 2, 2, 0}, 3);
  const double p_o = 5.0 / 8, p_e = 22.0 / 64;
  EXPECT_NEAR(cohen_kappa(b), (p_o - p_e) / (1 - p_e), 1e-15);
}

TEST(Kappa, DegenerateChanceAgreement) {
  EXPECT_EQ(cohen_kappa(labels({1, 1, 1}, {1, 1, 1})), 0.0);
}

TEST(Metrics, PermutationInvariance) {
  Rng rng(13);
  for (int t = 0; t < 20; ++t) {
    const EvalBatch b = oracles::random_batch(rng, 40, 3);
    const EvalBatch p = permuted(b, rng);
    EXPECT_EQ(accuracy(b), accuracy(p));
    EXPECT_NEAR(macro_f1(b), macro_f1(p), 1e-15);
    EXPECT_EQ(macro_ovr_auc(b), macro_ovr_auc(p));
    EXPECT_NEAR(cohen_kappa(b), cohen_kappa(p), 1e-15);
  }
}

TEST(Metrics, BoundsFuzz) {
  Rng rng(14);
  for (int t = 0; t < 1000; ++t) {
    const EvalBatch b = oracles::random_batch(rng, 2 + rng.index(60), 2 + rng.index(5));
    const double acc = accuracy(b), f1 = macro_f1(b);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
    EXPECT_GE(f1, 0.0);
    EXPECT_LE(f1, 1.0);
    try {
      const double auc = macro_ovr_auc(b);
      EXPECT_GE(auc, 0.0);
      EXPECT_LE(auc, 1.0);
    } catch (const UndefinedMetricError&) {
    }
    try {
      const double k = cohen_kappa(b);
      EXPECT_GE(k, -1.0);
      EXPECT_LE(k, 1.0);
    } catch (const UndefinedMetricError&) {
    }
  }
}

TEST(EvalBatch, ValidatesRowsAndLabels) {
  EXPECT_THROW(EvalBatch::from_scores({0, 1}, {{0.5, 0.4}, {0.5, 0.5}}), DimensionError);
  EXPECT_THROW(EvalBatch::from_scores({0, 2}, {{0.5, 0.5}, {0.5, 0.5}}), LabelError);
  EXPECT_THROW(EvalBatch::from_scores({0}, {{0.5, 0.5}, {0.5, 0.5}}), DimensionError);
  const EvalBatch tie = EvalBatch::from_scores({1}, {{0.5, 0.5}});
  EXPECT_EQ(tie.y_pred[0], 0);
  EvalBatch bad = tie;
  bad.y_pred[0] = 1;
  EXPECT_THROW(bad.validate(), LabelError);
}

TEST(Aggregate, Examples) {
  const std::vector<double> same{0.7, 0.7, 0.7};
  EXPECT_EQ(aggregate(same).std, 0.0);
  const std::vector<double> two{80, 90};
  EXPECT_EQ(aggregate(two).mean, 85.0);
  EXPECT_EQ(aggregate(two).std, 5.0);
  EXPECT_NEAR(aggregate(two, StdKind::sample).std, std::sqrt(50.0), 1e-12);
  const std::vector<double> three{86.47, 86.90, 87.33};
  const Summary s = aggregate(three);
  EXPECT_NEAR(s.mean, 86.90, 1e-12);
  EXPECT_NEAR(s.std, 0.35, 0.005);
  EXPECT_EQ(s.count, 3u);
}

TEST(Aggregate, SingleRunPassesThrough) {
  const std::vector<double> one{0.42};
  const Summary s = aggregate(one);
  EXPECT_EQ(s.mean, 0.42);
  EXPECT_EQ(s.std, 0.0);
  EXPECT_EQ(s.count, 1u);
  EXPECT_THROW(aggregate(std::vector<double>{}), DimensionError);
}

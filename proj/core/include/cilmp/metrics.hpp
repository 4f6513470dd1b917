#pragma once

#include <span>
#include <vector>

namespace cilmp {

// Labels, per-class probabilities and argmax predictions of one evaluation.
struct EvalBatch {
  std::vector<int> y_true;
  std::vector<std::vector<double>> y_score;  // [N][C], rows sum to 1
  std::vector<int> y_pred;
  std::size_t num_classes = 0;

  // y_pred is filled from y_score (ties -> lowest index).
  static EvalBatch from_scores(std::vector<int> y_true, std::vector<std::vector<double>> y_score);
  // Checks sizes, label ranges, row sums (1e-9) and argmax consistency.
  void validate() const;
  std::size_t size() const { return y_true.size(); }
};

double accuracy(const EvalBatch& b);

// Unweighted mean of per-class F1; a class absent from both y_true and
// y_pred is skipped, 0/0 counts as 0.
double macro_f1(const EvalBatch& b);

struct AucResult {
  double value = 0.0;
  std::vector<std::size_t> skipped_classes;  // no positives or no negatives
};

// One-vs-rest Mann-Whitney AUC with midranks, macro-averaged over the
// classes that have both positives and negatives.
AucResult macro_ovr_auc_detail(const EvalBatch& b);
double macro_ovr_auc(const EvalBatch& b);

double cohen_kappa(const EvalBatch& b);

struct MetricSet {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double auc = 0.0;
  double kappa = 0.0;
};

MetricSet evaluate(const EvalBatch& b);

enum class StdKind { population, sample };

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

// Fewer than 2 values pass through with std = 0.
Summary aggregate(std::span<const double> values, StdKind kind = StdKind::population);

}  // namespace cilmp

#include "cilmp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cilmp/errors.hpp"
#include "cilmp/prompts.hpp"

namespace cilmp {

namespace {

void require_nonempty(const EvalBatch& b) {
  if (b.y_true.empty()) throw DimensionError("metric on an empty batch");
  if (b.y_pred.size() != b.y_true.size()) throw DimensionError("y_pred and y_true differ in length");
}

std::size_t class_count(const EvalBatch& b) {
  std::size_t c = b.num_classes;
  for (int y : b.y_true) c = std::max(c, static_cast<std::size_t>(y) + 1);
  for (int y : b.y_pred) c = std::max(c, static_cast<std::size_t>(y) + 1);
  return c;
}

void check_labels(const std::vector<int>& labels) {
  for (int y : labels) {
    if (y < 0) throw LabelError("negative label " + std::to_string(y));
  }
}

}  // namespace

EvalBatch EvalBatch::from_scores(std::vector<int> y_true, std::vector<std::vector<double>> y_score) {
  EvalBatch b;
  b.num_classes = y_score.empty() ? 0 : y_score.front().size();
  b.y_pred.reserve(y_score.size());
  for (const auto& row : y_score) b.y_pred.push_back(argmax_lowest(row));
  b.y_true = std::move(y_true);
  b.y_score = std::move(y_score);
  b.validate();
  return b;
}

void EvalBatch::validate() const {
  require_nonempty(*this);
  if (y_score.size() != y_true.size()) throw DimensionError("y_score and y_true differ in length");
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const auto& row = y_score[i];
    if (row.size() != num_classes) throw DimensionError("y_score row " + std::to_string(i) + " has wrong width");
    if (y_true[i] < 0 || static_cast<std::size_t>(y_true[i]) >= num_classes) {
      throw LabelError("label " + std::to_string(y_true[i]) + " outside [0, " + std::to_string(num_classes) + ")");
    }
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-9) throw DimensionError("y_score row " + std::to_string(i) + " does not sum to 1");
    if (y_pred[i] != argmax_lowest(row)) throw LabelError("y_pred inconsistent with argmax at row " + std::to_string(i));
  }
}

double accuracy(const EvalBatch& b) {
  require_nonempty(b);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b.y_true.size(); ++i) hits += b.y_true[i] == b.y_pred[i];
  return static_cast<double>(hits) / static_cast<double>(b.y_true.size());
}

double macro_f1(const EvalBatch& b) {
  require_nonempty(b);
  check_labels(b.y_true);
  check_labels(b.y_pred);
  const std::size_t c_n = class_count(b);
  std::vector<std::size_t> tp(c_n), fp(c_n), fn(c_n), seen(c_n);
  for (std::size_t i = 0; i < b.y_true.size(); ++i) {
    const auto t = static_cast<std::size_t>(b.y_true[i]);
    const auto p = static_cast<std::size_t>(b.y_pred[i]);
    ++seen[t];
    ++seen[p];
    if (t == p) {
      ++tp[t];
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < c_n; ++c) {
    if (seen[c] == 0) continue;
    const double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
    total += denom > 0 ? 2.0 * static_cast<double>(tp[c]) / denom : 0.0;
    ++counted;
  }
  return total / static_cast<double>(counted);
}

AucResult macro_ovr_auc_detail(const EvalBatch& b) {
  require_nonempty(b);
  if (b.y_score.size() != b.y_true.size()) throw DimensionError("y_score and y_true differ in length");
  const std::size_t n = b.y_true.size(), c_n = b.num_classes;
  AucResult out;
  std::vector<std::size_t> order(n);
  std::vector<double> ranks(n);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < c_n; ++c) {
    std::size_t pos = 0;
    for (int y : b.y_true) pos += static_cast<std::size_t>(y) == c;
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) {
      out.skipped_classes.push_back(c);
      continue;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t z) { return b.y_score[a][c] < b.y_score[z][c]; });
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i + 1;
      while (j < n && b.y_score[order[j]][c] == b.y_score[order[i]][c]) ++j;
      const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
      for (std::size_t k = i; k < j; ++k) ranks[order[k]] = mid;
      i = j;
    }
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (static_cast<std::size_t>(b.y_true[i]) == c) rank_sum += ranks[i];
    }
    const double p = static_cast<double>(pos);
    const double u = rank_sum - p * (p + 1.0) / 2.0;
    total += u / (p * static_cast<double>(neg));
    ++counted;
  }
  if (counted == 0) throw UndefinedMetricError("macro AUC: no class has both positives and negatives");
  out.value = total / static_cast<double>(counted);
  return out;
}

double macro_ovr_auc(const EvalBatch& b) { return macro_ovr_auc_detail(b).value; }

double cohen_kappa(const EvalBatch& b) {
  require_nonempty(b);
  check_labels(b.y_true);
  check_labels(b.y_pred);
  const std::size_t c_n = class_count(b);
  const double n = static_cast<double>(b.y_true.size());
  std::vector<double> rows(c_n), cols(c_n);
  double agree = 0.0;
  for (std::size_t i = 0; i < b.y_true.size(); ++i) {
    rows[static_cast<std::size_t>(b.y_true[i])] += 1.0;
    cols[static_cast<std::size_t>(b.y_pred[i])] += 1.0;
    agree += b.y_true[i] == b.y_pred[i];
  }
  const double p_o = agree / n;
  double p_e = 0.0;
  for (std::size_t c = 0; c < c_n; ++c) p_e += (rows[c] / n) * (cols[c] / n);
  if (p_e >= 1.0) {
    if (p_o == 1.0) return 0.0;
    throw UndefinedMetricError("kappa undefined: chance agreement is 1 with imperfect observed agreement");
  }
  return (p_o - p_e) / (1.0 - p_e);
}

MetricSet evaluate(const EvalBatch& b) {
  return {accuracy(b), macro_f1(b), macro_ovr_auc(b), cohen_kappa(b)};
}

Summary aggregate(std::span<const double> values, StdKind kind) {
  if (values.empty()) throw DimensionError("aggregate over no runs");
  Summary s;
  s.count = values.size();
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); })) {
    s.mean = values.front();
    return s;
  }
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  const double denom = static_cast<double>(kind == StdKind::sample ? values.size() - 1 : values.size());
  s.std = std::sqrt(sq / denom);
  return s;
}

}  // namespace cilmp

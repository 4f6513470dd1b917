#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cilmp/metrics.hpp"
#include "cilmp/rng.hpp"

namespace oracles {

// Brute-force one-vs-rest AUC: P(score_pos > score_neg) + 0.5 P(tie), macro
// mean over classes with both positives and negatives.
inline double pairwise_macro_auc(const cilmp::EvalBatch& b) {
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < b.num_classes; ++c) {
    double wins = 0.0;
    std::size_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (static_cast<std::size_t>(b.y_true[i]) != c) continue;
      ++pos;
      for (std::size_t j = 0; j < b.size(); ++j) {
        if (static_cast<std::size_t>(b.y_true[j]) == c) continue;
        const double si = b.y_score[i][c], sj = b.y_score[j][c];
        wins += si > sj ? 1.0 : (si == sj ? 0.5 : 0.0);
      }
    }
    neg = b.size() - pos;
    if (pos == 0 || neg == 0) continue;
    total += wins / (static_cast<double>(pos) * static_cast<double>(neg));
    ++counted;
  }
  return total / static_cast<double>(counted);
}

// Random labels and softmax-like score rows. Scores are quantised so ties occur.
inline cilmp::EvalBatch random_batch(cilmp::Rng& rng, std::size_t n, std::size_t c) {
  std::vector<int> y(n);
  std::vector<std::vector<double>> s(n, std::vector<double>(c));
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(rng.index(c));
    double total = 0.0;
    for (auto& v : s[i]) {
      v = 1.0 + static_cast<double>(rng.index(8));
      total += v;
    }
    for (auto& v : s[i]) v /= total;
  }
  return cilmp::EvalBatch::from_scores(std::move(y), std::move(s));
}

}  // namespace oracles

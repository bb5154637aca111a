#pragma once

// Evaluation metrics over clip-level scores. All arithmetic in double.
//
// Score matrices are flat row-major [n_instances, n_classes].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "slcn/tensor.hpp"  // Error

namespace slcn {

/// ROC AUC by rank sum; tied scores count half. Equals exhaustive
/// pair counting exactly: tie groups get their average rank, so the rank sum
/// accumulates the same integer-and-half values.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw Error("roc_auc: " + std::to_string(scores.size()) + " scores vs " +
                std::to_string(labels.size()) + " labels");
  std::int64_t pos = 0, neg = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw Error("roc_auc: labels must be 0 or 1");
    (l == 1 ? pos : neg)++;
  }
  if (pos == 0 || neg == 0) throw Error("roc_auc: needs at least one positive and one negative");

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    double avg_rank = static_cast<double>(i + 1 + j + 1) / 2.0;  // 1-based
    for (std::size_t k = i; k <= j; ++k)
      if (labels[idx[k]] == 1) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  double u = pos_rank_sum - static_cast<double>(pos) * static_cast<double>(pos + 1) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

struct MacroAuc {
  double value = 0.0;
  std::int64_t excluded = 0;  // classes with a single-valued truth column
};

/// Mean per-class AUC, skipping classes whose truth column is all positive or
/// all negative (their AUC is undefined); the count of skipped classes is
/// surfaced so callers can warn.
inline MacroAuc macro_auc(const std::vector<double>& scores, const std::vector<int>& truth,
                          std::int64_t n, std::int64_t classes) {
  if (n < 1 || classes < 1) throw Error("macro_auc: empty score matrix");
  if (scores.size() != static_cast<std::size_t>(n * classes) || truth.size() != scores.size())
    throw Error("macro_auc: size mismatch");
  double sum = 0.0;
  std::int64_t used = 0, excluded = 0;
  std::vector<double> col_scores(static_cast<std::size_t>(n));
  std::vector<int> col_truth(static_cast<std::size_t>(n));
  for (std::int64_t c = 0; c < classes; ++c) {
    std::int64_t pos = 0;
    for (std::int64_t r = 0; r < n; ++r) {
      col_scores[static_cast<std::size_t>(r)] = scores[r * classes + c];
      col_truth[static_cast<std::size_t>(r)] = truth[r * classes + c];
      pos += truth[r * classes + c];
    }
    if (pos == 0 || pos == n) {
      ++excluded;
      continue;
    }
    sum += roc_auc(col_scores, col_truth);
    ++used;
  }
  if (used == 0) throw Error("macro_auc: every class is single-valued");
  return {sum / static_cast<double>(used), excluded};
}

/// AUC over the pooled (score, truth) pairs of every class.
inline double micro_auc(const std::vector<double>& scores, const std::vector<int>& truth,
                        std::int64_t n, std::int64_t classes) {
  if (scores.size() != static_cast<std::size_t>(n * classes) || truth.size() != scores.size())
    throw Error("micro_auc: size mismatch");
  return roc_auc(scores, std::vector<int>(truth.begin(), truth.end()));
}

/// Mean per-instance F1 after thresholding scores (strictly greater). An
/// instance with empty prediction and empty truth scores 1; empty on exactly
/// one side scores 0.
inline double instance_f1(const std::vector<double>& scores, const std::vector<int>& truth,
                          std::int64_t n, std::int64_t classes, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw Error("instance_f1: threshold must be in (0,1)");
  if (n < 1) throw Error("instance_f1: empty score matrix");
  if (scores.size() != static_cast<std::size_t>(n * classes) || truth.size() != scores.size())
    throw Error("instance_f1: size mismatch");
  double sum = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::int64_t c = 0; c < classes; ++c) {
      bool pred = scores[r * classes + c] > threshold;
      bool actual = truth[r * classes + c] != 0;
      if (pred && actual) ++tp;
      else if (pred) ++fp;
      else if (actual) ++fn;
    }
    double f;
    if (tp + fp == 0 && tp + fn == 0) {
      f = 1.0;
    } else if (tp + fp == 0 || tp + fn == 0) {
      f = 0.0;
    } else {
      double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
      double rec = static_cast<double>(tp) / static_cast<double>(tp + fn);
      f = p + rec > 0.0 ? 2.0 * p * rec / (p + rec) : 0.0;
    }
    sum += f;
  }
  return sum / static_cast<double>(n);
}

/// Fraction of instances whose highest-scoring class (lowest index on ties)
/// matches the truth.
inline double accuracy(const std::vector<double>& scores, const std::vector<std::int64_t>& truth,
                       std::int64_t n, std::int64_t classes) {
  if (n < 1) throw Error("accuracy: empty score matrix");
  if (scores.size() != static_cast<std::size_t>(n * classes) ||
      truth.size() != static_cast<std::size_t>(n))
    throw Error("accuracy: size mismatch");
  std::int64_t correct = 0;
  for (std::int64_t r = 0; r < n; ++r) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < classes; ++c)
      if (scores[r * classes + c] > scores[r * classes + best]) best = c;
    if (truth[static_cast<std::size_t>(r)] < 0 || truth[static_cast<std::size_t>(r)] >= classes)
      throw Error("accuracy: class index out of range");
    if (best == truth[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace slcn

#pragma once

// Evaluation metrics. All statistics are population (divide by n) and are
// accumulated in double regardless of the input element type.

#include <cmath>
#include <cstddef>
#include <vector>

#include "aver/errors.hpp"

namespace aver {

struct CccReport {
  double ccc = 0.0;
  double pearson = 0.0;
  double mean_true = 0.0;
  double mean_pred = 0.0;
  double std_true = 0.0;
  double std_pred = 0.0;
  double covariance = 0.0;
};

// Concordance correlation between a prediction series and a target series.
// Two equal constant series agree perfectly (ccc = 1); a constant series
// against a varying one has zero covariance and a positive denominator, so
// ccc = 0. Pearson is reported as 0 whenever either side is constant.
template <typename T>
CccReport concordance(const std::vector<T>& truth, const std::vector<T>& pred) {
  require(truth.size() == pred.size(), "concordance: series lengths differ, ", truth.size(),
          " vs ", pred.size());
  require(!truth.empty(), "concordance: empty series");
  const double n = static_cast<double>(truth.size());

  CccReport r;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    r.mean_true += static_cast<double>(truth[i]);
    r.mean_pred += static_cast<double>(pred[i]);
  }
  r.mean_true /= n;
  r.mean_pred /= n;

  double var_t = 0.0, var_p = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double dt = static_cast<double>(truth[i]) - r.mean_true;
    const double dp = static_cast<double>(pred[i]) - r.mean_pred;
    var_t += dt * dt;
    var_p += dp * dp;
    r.covariance += dt * dp;
  }
  var_t /= n;
  var_p /= n;
  r.covariance /= n;
  r.std_true = std::sqrt(var_t);
  r.std_pred = std::sqrt(var_p);

  const double mean_gap = r.mean_true - r.mean_pred;
  const double denom = var_t + var_p + mean_gap * mean_gap;
  r.ccc = denom > 0.0 ? 2.0 * r.covariance / denom : 1.0;
  const double std_prod = r.std_true * r.std_pred;
  r.pearson = std_prod > 0.0 ? r.covariance / std_prod : 0.0;
  return r;
}

// Fraction of triplets whose two same-expression rows sit strictly closer to
// each other than either sits to the odd row. Embeddings are laid out as
// consecutive triples; odd_index[t] in {0,1,2} marks the odd row of triple t.
// Ties count as incorrect.
template <typename T>
double triplet_accuracy(const std::vector<T>& embeddings, std::size_t dim,
                        const std::vector<int>& odd_index) {
  require(dim > 0, "triplet_accuracy: zero embedding dim");
  require(embeddings.size() == odd_index.size() * 3 * dim,
          "triplet_accuracy: expected ", odd_index.size() * 3, " rows of dim ", dim);
  if (odd_index.empty()) return 0.0;

  auto sqdist = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = static_cast<double>(embeddings[a * dim + d]) -
                          static_cast<double>(embeddings[b * dim + d]);
      s += diff * diff;
    }
    return s;
  };

  std::size_t correct = 0;
  for (std::size_t t = 0; t < odd_index.size(); ++t) {
    const int odd = odd_index[t];
    require(odd >= 0 && odd < 3, "triplet_accuracy: odd index out of range");
    const std::size_t base = t * 3;
    const std::size_t o = base + static_cast<std::size_t>(odd);
    const std::size_t p = base + (odd == 0 ? 1 : 0);
    const std::size_t q = base + (odd == 2 ? 1 : 2);
    const double same = sqdist(p, q);
    if (same < sqdist(p, o) && same < sqdist(q, o)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(odd_index.size());
}

inline double classification_accuracy(const std::vector<int>& predicted,
                                      const std::vector<int>& labels) {
  require(predicted.size() == labels.size(), "accuracy: length mismatch");
  require(!labels.empty(), "accuracy: empty label set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predicted[i] == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// Mean per-class recall over the classes that actually appear. A constant
// predictor on a set where all `num_classes` classes appear scores
// 1 / num_classes.
inline double balanced_accuracy(const std::vector<int>& predicted, const std::vector<int>& labels,
                                int num_classes) {
  require(predicted.size() == labels.size(), "balanced_accuracy: length mismatch");
  require(num_classes > 0, "balanced_accuracy: num_classes must be positive");
  std::vector<std::size_t> hits(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::size_t> support(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < num_classes, "balanced_accuracy: label ", labels[i],
            " outside [0,", num_classes, ")");
    ++support[static_cast<std::size_t>(labels[i])];
    if (predicted[i] == labels[i]) ++hits[static_cast<std::size_t>(labels[i])];
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (support[static_cast<std::size_t>(c)] == 0) continue;
    ++present;
    sum += static_cast<double>(hits[static_cast<std::size_t>(c)]) /
           static_cast<double>(support[static_cast<std::size_t>(c)]);
  }
  require(present > 0, "balanced_accuracy: no labels present");
  return sum / static_cast<double>(present);
}

// Row-wise argmax of a [B, K] score matrix.
template <typename T>
std::vector<int> argmax_rows(const std::vector<T>& scores, std::size_t num_classes) {
  require(num_classes > 0, "argmax_rows: zero classes");
  require(scores.size() % num_classes == 0, "argmax_rows: size not divisible by class count");
  const std::size_t rows = scores.size() / num_classes;
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < num_classes; ++k) {
      if (scores[r * num_classes + k] > scores[r * num_classes + best]) best = k;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace aver

#pragma once

#include <map>
#include <vector>

#include "mhthfa/errors.hpp"
#include "mhthfa/types.hpp"

namespace mhthfa {

/// Cross-tabulation with rows and columns in ascending order of the distinct label values.
struct ConfusionMatrix {
  std::vector<int> row_labels;
  std::vector<int> col_labels;
  Eigen::MatrixXi counts;
};

inline ConfusionMatrix confusion_matrix(const IntVector& truth, const IntVector& predicted) {
  if (truth.size() != predicted.size()) throw DimensionMismatch("confusion_matrix: label vectors differ in length");
  std::map<int, int> rows, cols;
  for (Index i = 0; i < truth.size(); ++i) {
    rows.emplace(truth[i], 0);
    cols.emplace(predicted[i], 0);
  }
  ConfusionMatrix out;
  for (auto& [label, idx] : rows) {
    idx = static_cast<int>(out.row_labels.size());
    out.row_labels.push_back(label);
  }
  for (auto& [label, idx] : cols) {
    idx = static_cast<int>(out.col_labels.size());
    out.col_labels.push_back(label);
  }
  out.counts = Eigen::MatrixXi::Zero(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
  for (Index i = 0; i < truth.size(); ++i) ++out.counts(rows[truth[i]], cols[predicted[i]]);
  return out;
}

/// Hubert-Arabie adjusted Rand index of a contingency table.
inline double adjusted_rand_index(const Eigen::MatrixXi& table) {
  auto pairs = [](double m) { return 0.5 * m * (m - 1.0); };
  double sum_cells = 0.0, sum_rows = 0.0, sum_cols = 0.0, n = 0.0;
  for (Index i = 0; i < table.rows(); ++i)
    for (Index j = 0; j < table.cols(); ++j) {
      sum_cells += pairs(table(i, j));
      n += table(i, j);
    }
  for (Index i = 0; i < table.rows(); ++i) sum_rows += pairs(table.row(i).sum());
  for (Index j = 0; j < table.cols(); ++j) sum_cols += pairs(table.col(j).sum());
  const double total = pairs(n);
  if (total == 0.0) return 1.0;
  const double expected = sum_rows * sum_cols / total;
  const double maximum = 0.5 * (sum_rows + sum_cols);
  if (maximum == expected) return 1.0;
  return (sum_cells - expected) / (maximum - expected);
}

inline double adjusted_rand_index(const IntVector& a, const IntVector& b) {
  if (a.size() != b.size()) throw DimensionMismatch("adjusted_rand_index: label vectors differ in length");
  return adjusted_rand_index(confusion_matrix(a, b).counts);
}

}  // namespace mhthfa

#ifndef ASPCNET_METRICS_HPP
#define ASPCNET_METRICS_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace aspcnet {

/// T x T confusion counts; rows are the true class, columns the prediction.
/// Class indices are 0-based here.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);

  void accumulate(int truth, int predicted);
  /// Elementwise addition; equivalent to accumulating the concatenated stream.
  void merge(const ConfusionMatrix& other);

  int classes() const { return classes_; }
  std::int64_t at(int truth, int predicted) const;
  std::int64_t total() const { return total_; }
  std::int64_t row_total(int truth) const;
  std::int64_t col_total(int predicted) const;

  double overall_accuracy() const;
  /// Mean of per-class accuracies; classes with no true samples are skipped
  /// (a warning line is appended when `warnings` is given).
  double average_accuracy(std::string* warnings = nullptr) const;
  /// Cohen's kappa from the row/column marginals.
  double kappa() const;
  std::vector<double> per_class_accuracy() const;  // -1 for empty classes

  /// Per-class accuracy lines followed by OA/AA/Kappa as percentages with two
  /// decimals.
  std::string report() const;

 private:
  int classes_;
  std::int64_t total_ = 0;
  std::vector<std::int64_t> counts_;
};

}  // namespace aspcnet

#endif  // ASPCNET_METRICS_HPP

#include "aspcnet/metrics.hpp"

#include <cstdio>
#include <stdexcept>

namespace aspcnet {

ConfusionMatrix::ConfusionMatrix(int classes) : classes_(classes) {
  if (classes < 1) throw std::invalid_argument("confusion matrix: need >= 1 class");
  counts_.assign(static_cast<std::size_t>(classes) * classes, 0);
}

void ConfusionMatrix::accumulate(int truth, int predicted) {
  if (truth < 0 || truth >= classes_ || predicted < 0 || predicted >= classes_)
    throw std::invalid_argument("confusion matrix: label out of range");
  ++counts_[static_cast<std::size_t>(truth) * classes_ + predicted];
  ++total_;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_)
    throw std::invalid_argument("confusion matrix: class count mismatch in merge");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  total_ += other.total_;
}

std::int64_t ConfusionMatrix::at(int truth, int predicted) const {
  return counts_[static_cast<std::size_t>(truth) * classes_ + predicted];
}

std::int64_t ConfusionMatrix::row_total(int truth) const {
  std::int64_t s = 0;
  for (int p = 0; p < classes_; ++p) s += at(truth, p);
  return s;
}

std::int64_t ConfusionMatrix::col_total(int predicted) const {
  std::int64_t s = 0;
  for (int t = 0; t < classes_; ++t) s += at(t, predicted);
  return s;
}

double ConfusionMatrix::overall_accuracy() const {
  if (total_ == 0) throw std::invalid_argument("confusion matrix: empty");
  std::int64_t trace = 0;
  for (int t = 0; t < classes_; ++t) trace += at(t, t);
  return static_cast<double>(trace) / static_cast<double>(total_);
}

std::vector<double> ConfusionMatrix::per_class_accuracy() const {
  std::vector<double> out(static_cast<std::size_t>(classes_), -1.0);
  for (int t = 0; t < classes_; ++t) {
    const std::int64_t row = row_total(t);
    if (row > 0)
      out[static_cast<std::size_t>(t)] = static_cast<double>(at(t, t)) / static_cast<double>(row);
  }
  return out;
}

double ConfusionMatrix::average_accuracy(std::string* warnings) const {
  if (total_ == 0) throw std::invalid_argument("confusion matrix: empty");
  double sum = 0;
  int live = 0;
  const auto acc = per_class_accuracy();
  for (int t = 0; t < classes_; ++t) {
    if (acc[static_cast<std::size_t>(t)] < 0) {
      if (warnings)
        *warnings += "class " + std::to_string(t + 1) + " has no test samples, skipped in AA\n";
      continue;
    }
    sum += acc[static_cast<std::size_t>(t)];
    ++live;
  }
  if (live == 0) throw std::invalid_argument("confusion matrix: no populated classes");
  return sum / live;
}

double ConfusionMatrix::kappa() const {
  if (total_ == 0) throw std::invalid_argument("confusion matrix: empty");
  const double n = static_cast<double>(total_);
  const double po = overall_accuracy();
  double pe = 0;
  for (int t = 0; t < classes_; ++t)
    pe += (static_cast<double>(row_total(t)) / n) * (static_cast<double>(col_total(t)) / n);
  if (pe >= 1.0) return po >= 1.0 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

std::string ConfusionMatrix::report() const {
  std::string out;
  char buf[96];
  const auto acc = per_class_accuracy();
  for (int t = 0; t < classes_; ++t) {
    if (acc[static_cast<std::size_t>(t)] < 0)
      std::snprintf(buf, sizeof(buf), "class %d: n/a (no samples)\n", t + 1);
    else
      std::snprintf(buf, sizeof(buf), "class %d: %.2f\n", t + 1,
                    100.0 * acc[static_cast<std::size_t>(t)]);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "OA: %.2f\nAA: %.2f\nKappa: %.2f\n",
                100.0 * overall_accuracy(), 100.0 * average_accuracy(), 100.0 * kappa());
  out += buf;
  return out;
}

}  // namespace aspcnet

#pragma once

#include <cstdint>
#include <vector>

#include "coseg/common.hpp"

namespace coseg {

// Pixel-count confusion matrix; entry (g, p) counts pixels with ground
// truth g predicted as p. Accumulation is associative, and matrices from
// parallel shards merge by addition.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);

  int classes() const { return classes_; }
  uint64_t at(int gt, int pred) const;
  uint64_t total() const;

  // pixels with gt == ignore_label are skipped
  void accumulate(const ClassMap& pred, const ClassMap& gt, uint8_t ignore_label = 255);
  void merge(const ConfusionMatrix& other);

 private:
  int classes_;
  std::vector<uint64_t> counts_;  // row-major, row = gt
};

struct IouReport {
  std::vector<double> per_class;  // NaN for classes absent from both gt and pred
  std::vector<bool> present;
  double miou = 0;  // mean over present classes only
};

// IoU_c = TP / (TP + FP + FN); classes absent from both prediction and
// ground truth are excluded from the mean. All classes absent -> DataError.
IouReport miou(const ConfusionMatrix& cm);

// Two-class IoU of the positive class. When neither prediction nor ground
// truth contains a positive pixel the value is defined as 1.0 (vacuously
// perfect) so aggregate means stay total.
double jaccard_binary(const ConfusionMatrix& cm, int positive_class = 1);

}  // namespace coseg

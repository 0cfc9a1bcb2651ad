#include "coseg/metrics.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace coseg {

ConfusionMatrix::ConfusionMatrix(int classes) : classes_(classes) {
  if (classes < 2) throw ConfigError("confusion matrix: need at least 2 classes");
  counts_.assign(static_cast<size_t>(classes) * classes, 0);
}

uint64_t ConfusionMatrix::at(int gt, int pred) const {
  if (gt < 0 || gt >= classes_ || pred < 0 || pred >= classes_)
    throw DataError("confusion matrix: index out of range");
  return counts_[static_cast<size_t>(gt) * classes_ + pred];
}

uint64_t ConfusionMatrix::total() const {
  uint64_t n = 0;
  for (uint64_t c : counts_) n += c;
  return n;
}

void ConfusionMatrix::accumulate(const ClassMap& pred, const ClassMap& gt, uint8_t ignore_label) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw ShapeError("confusion matrix: prediction " + std::to_string(pred.h) + "x" +
                     std::to_string(pred.w) + " vs ground truth " + std::to_string(gt.h) + "x" +
                     std::to_string(gt.w));
  for (size_t i = 0; i < gt.v.size(); ++i) {
    const uint8_t g = gt.v[i];
    if (g == ignore_label) continue;
    const uint8_t p = pred.v[i];
    if (g >= classes_ || p >= classes_)
      throw DataError("confusion matrix: class id out of range (gt=" + std::to_string(int(g)) +
                      ", pred=" + std::to_string(int(p)) + ", C=" + std::to_string(classes_) + ")");
    ++counts_[static_cast<size_t>(g) * classes_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw ShapeError("confusion matrix: class count mismatch in merge");
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

IouReport miou(const ConfusionMatrix& cm) {
  const int c = cm.classes();
  IouReport r;
  r.per_class.assign(c, std::numeric_limits<double>::quiet_NaN());
  r.present.assign(c, false);
  double acc = 0;
  int n_present = 0;
  for (int k = 0; k < c; ++k) {
    uint64_t tp = cm.at(k, k), fp = 0, fn = 0;
    for (int j = 0; j < c; ++j) {
      if (j == k) continue;
      fn += cm.at(k, j);
      fp += cm.at(j, k);
    }
    if (tp + fp + fn == 0) continue;  // class absent from both gt and pred
    r.present[k] = true;
    r.per_class[k] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    acc += r.per_class[k];
    ++n_present;
  }
  if (n_present == 0) throw DataError("miou: every class absent from both prediction and ground truth");
  r.miou = acc / n_present;
  return r;
}

double jaccard_binary(const ConfusionMatrix& cm, int positive_class) {
  if (cm.classes() != 2) throw ConfigError("jaccard_binary: defined for exactly 2 classes");
  if (positive_class != 0 && positive_class != 1) throw ConfigError("jaccard_binary: positive class must be 0 or 1");
  const int p = positive_class;
  const uint64_t tp = cm.at(p, p);
  const uint64_t fn = cm.at(p, 1 - p);
  const uint64_t fp = cm.at(1 - p, p);
  if (tp + fp + fn == 0) return 1.0;
  return static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
}

}  // namespace coseg

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hseg/tensor.hpp"

namespace hseg {

// Square count matrix indexed [ground truth][prediction]. Accumulators are
// mergeable values: element-wise sums commute, so evaluation may be sharded.
struct ConfusionAccumulator {
  int num_classes = 0;
  std::vector<int64_t> counts;  // row-major, gt * num_classes + pred

  ConfusionAccumulator() = default;
  explicit ConfusionAccumulator(int classes)
      : num_classes(classes),
        counts(static_cast<size_t>(classes) * static_cast<size_t>(classes), 0) {}

  int64_t& at(int gt, int pred) {
    return counts[static_cast<size_t>(gt) * num_classes + pred];
  }
  int64_t at(int gt, int pred) const {
    return counts[static_cast<size_t>(gt) * num_classes + pred];
  }
  int64_t total() const;
  void add(int gt, int pred);
  void merge(const ConfusionAccumulator& other);
};

// Per-pixel tally of (gt, pred) pairs; pixels with the ignore id are skipped.
void accumulate(ConfusionAccumulator& acc, const std::vector<int>& gt_map,
                const std::vector<int>& pred_map, int ignore_id);

struct ClassScore {
  int cls = 0;
  double pa = 0;
  double iou = 0;
  int64_t gt_pixels = 0;
};

struct MetricResult {
  double mpa = 0;
  double miou = 0;
  std::vector<ClassScore> per_class;  // classes with at least one gt pixel
  int scored_classes = 0;
};

// PA_c = M[c][c] / row_c; IoU_c = M[c][c] / (row_c + col_c - M[c][c]).
// Means run over the filtered classes with at least one gt pixel; classes
// absent from the ground truth are excluded rather than scored zero.
MetricResult mpa_miou(const ConfusionAccumulator& acc, const std::vector<int>& class_filter);

// Flat-baseline scoring aid for subclass pixels: when the top choice is the
// superclass, the second most probable class is scored instead. Pixels whose
// ground truth is outside `subclasses` are returned unchanged.
std::vector<int> flat_protocol_score(const std::vector<int>& gt_map, const Tensor& sigma,
                                     int superclass, const std::vector<int>& subclasses);

struct SplitCounts {
  std::string split;
  std::vector<int64_t> counts;  // per class
};

// Classes whose pixel count satisfies the threshold condition on every
// split. `more_than` selects count > threshold (default); the opposite
// direction (count < threshold) is available for count-capped protocols.
std::vector<int> filter_evaluated_classes(const std::vector<SplitCounts>& splits,
                                          int64_t threshold, bool more_than = true);

std::string format_metric_table(const MetricResult& result,
                                const std::vector<std::string>& class_names);

}  // namespace hseg

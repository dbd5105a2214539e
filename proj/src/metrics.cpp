#include "hseg/metrics.hpp"

#include <algorithm>
#include <sstream>

#include "hseg/ops.hpp"
#include "hseg/util.hpp"

namespace hseg {

int64_t ConfusionAccumulator::total() const {
  int64_t t = 0;
  for (int64_t c : counts) t += c;
  return t;
}

void ConfusionAccumulator::add(int gt, int pred) {
  if (gt < 0 || gt >= num_classes || pred < 0 || pred >= num_classes) {
    throw Error(strprintf("confusion accumulator: label (%d, %d) outside the %d-class matrix", gt,
                          pred, num_classes));
  }
  ++at(gt, pred);
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
  if (other.num_classes != num_classes) {
    throw Error("confusion accumulator merge: class count mismatch");
  }
  for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

void accumulate(ConfusionAccumulator& acc, const std::vector<int>& gt_map,
                const std::vector<int>& pred_map, int ignore_id) {
  if (gt_map.size() != pred_map.size()) {
    throw Error("accumulate: ground truth and prediction extents differ");
  }
  for (size_t i = 0; i < gt_map.size(); ++i) {
    if (gt_map[i] == ignore_id) continue;
    acc.add(gt_map[i], pred_map[i]);
  }
}

MetricResult mpa_miou(const ConfusionAccumulator& acc, const std::vector<int>& class_filter) {
  if (class_filter.empty()) throw Error("mpa_miou: empty class filter");
  MetricResult res;
  double pa_sum = 0, iou_sum = 0;
  for (int c : class_filter) {
    if (c < 0 || c >= acc.num_classes) {
      throw Error(strprintf("mpa_miou: class %d outside the %d-class matrix", c,
                            acc.num_classes));
    }
    int64_t row = 0, col = 0;
    for (int k = 0; k < acc.num_classes; ++k) {
      row += acc.at(c, k);
      col += acc.at(k, c);
    }
    if (row == 0) continue;  // class absent from the ground truth
    int64_t diag = acc.at(c, c);
    ClassScore score;
    score.cls = c;
    score.gt_pixels = row;
    score.pa = static_cast<double>(diag) / static_cast<double>(row);
    score.iou = static_cast<double>(diag) / static_cast<double>(row + col - diag);
    pa_sum += score.pa;
    iou_sum += score.iou;
    res.per_class.push_back(score);
  }
  res.scored_classes = static_cast<int>(res.per_class.size());
  if (res.scored_classes > 0) {
    res.mpa = pa_sum / res.scored_classes;
    res.miou = iou_sum / res.scored_classes;
  }
  return res;
}

std::vector<int> flat_protocol_score(const std::vector<int>& gt_map, const Tensor& sigma,
                                     int superclass, const std::vector<int>& subclasses) {
  if (sigma.shape().size() != 4) throw Error("flat_protocol_score expects an NCHW sigma map");
  const int c = sigma.dim(1);
  if (superclass < 0 || superclass >= c) {
    throw Error(strprintf("flat_protocol_score: superclass %d outside the %d-class space",
                          superclass, c));
  }
  for (int s : subclasses) {
    if (s < 0 || s >= c) {
      throw Error(strprintf("flat_protocol_score: subclass %d outside the %d-class space", s, c));
    }
  }
  const int64_t plane = static_cast<int64_t>(sigma.dim(2)) * sigma.dim(3);
  const int64_t npix = static_cast<int64_t>(sigma.dim(0)) * plane;
  if (static_cast<int64_t>(gt_map.size()) != npix) {
    throw Error("flat_protocol_score: ground truth extents do not match sigma");
  }
  std::vector<uint8_t> is_sub(static_cast<size_t>(c), 0);
  for (int s : subclasses) is_sub[static_cast<size_t>(s)] = 1;

  const auto& sv = sigma.values();
  std::vector<int> pred(gt_map.size());
  for (int64_t p = 0; p < npix; ++p) {
    int64_t n = p / plane, k = p % plane;
    auto prob = [&](int ch) {
      return sv[static_cast<size_t>((n * c + ch) * plane + k)];
    };
    int best = 0;
    for (int ch = 1; ch < c; ++ch) {
      if (prob(ch) > prob(best)) best = ch;
    }
    int out = best;
    int gt = gt_map[static_cast<size_t>(p)];
    bool gt_is_sub = gt >= 0 && gt < c && is_sub[static_cast<size_t>(gt)];
    if (gt_is_sub && best == superclass) {
      // fall back to the runner-up choice
      int second = -1;
      for (int ch = 0; ch < c; ++ch) {
        if (ch == best) continue;
        if (second == -1 || prob(ch) > prob(second)) second = ch;
      }
      if (second != -1) out = second;
    }
    pred[static_cast<size_t>(p)] = out;
  }
  return pred;
}

std::vector<int> filter_evaluated_classes(const std::vector<SplitCounts>& splits,
                                          int64_t threshold, bool more_than) {
  if (splits.empty()) return {};
  size_t classes = splits.front().counts.size();
  for (const auto& s : splits) {
    if (s.counts.size() != classes) {
      throw Error("filter_evaluated_classes: split count vectors differ in length");
    }
  }
  std::vector<int> out;
  for (size_t c = 0; c < classes; ++c) {
    bool keep = true;
    for (const auto& s : splits) {
      int64_t n = s.counts[c];
      if (more_than ? (n <= threshold) : (n >= threshold)) {
        keep = false;
        break;
      }
    }
    if (keep) out.push_back(static_cast<int>(c));
  }
  return out;
}

std::string format_metric_table(const MetricResult& result,
                                const std::vector<std::string>& class_names) {
  std::ostringstream out;
  size_t width = 5;
  for (const auto& s : result.per_class) {
    if (s.cls >= 0 && s.cls < static_cast<int>(class_names.size())) {
      width = std::max(width, class_names[static_cast<size_t>(s.cls)].size());
    }
  }
  out << strprintf("%-*s %10s %10s %12s\n", static_cast<int>(width), "class", "PA", "IoU",
                   "gt pixels");
  for (const auto& s : result.per_class) {
    std::string name = s.cls < static_cast<int>(class_names.size())
                           ? class_names[static_cast<size_t>(s.cls)]
                           : strprintf("#%d", s.cls);
    out << strprintf("%-*s %10.4f %10.4f %12lld\n", static_cast<int>(width), name.c_str(), s.pa,
                     s.iou, static_cast<long long>(s.gt_pixels));
  }
  out << strprintf("mPA %.4f  mIoU %.4f  over %d classes\n", result.mpa, result.miou,
                   result.scored_classes);
  return out.str();
}

}  // namespace hseg

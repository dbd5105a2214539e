#pragma once

#include <map>
#include <string>
#include <vector>

#include "hseg/hierarchy.hpp"
#include "hseg/metrics.hpp"
#include "hseg/network.hpp"
#include "hseg/synth_data.hpp"

namespace hseg {

struct EvalOptions {
  std::string mode = "hier";  // hier | flat
  int crop_h = 48;
  int crop_w = 48;
  FlatSpace flat_space;        // flat mode only
  bool flat_protocol = false;  // second-choice rescoring for subclass pixels
  int protocol_superclass = -1;  // node id of the coarse class
};

// Hierarchical scoring follows the ground truth: each classifier is scored
// on the pixels whose ground-truth path reaches it, against its own dense
// decisions. Per-level results live in node space so flat and hierarchical
// runs are directly comparable; flat predictions are truncated to the level.
struct EvalResult {
  std::map<std::string, double> metrics;       // flat key/value view for logs
  std::map<int, MetricResult> per_classifier;  // hier mode
  std::map<int, MetricResult> per_level;       // keyed by level
  MetricResult flat;                           // flat mode, union-space table
  double overall_mpa = 0;
  double overall_miou = 0;
};

EvalResult evaluate(Network& net, const LabelHierarchy& h,
                    const std::vector<LoadedDataset>& datasets, const std::string& split,
                    const EvalOptions& opts);

}  // namespace hseg

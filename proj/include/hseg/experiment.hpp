#pragma once

#include <string>
#include <vector>

#include "hseg/real.hpp"

namespace hseg {

struct ExperimentOptions {
  int seeds = 3;
  int steps = 800;
  int train_images = 48;
  int val_images = 16;
  real_t lr = real_t(0.1);
  int crop = 48;
  int eval_every = 200;
  int warmup = -1;  // -1 = one epoch of the largest dataset
  uint64_t base_seed = 1;
  bool verbose = true;
};

// Tuned defaults per experiment. The box-transfer runs use a longer, calmer
// schedule: pseudo-GT supervision only stabilizes once the parent classifier
// detects the objects reliably.
ExperimentOptions ab_compare_defaults();
ExperimentOptions bbox_transfer_defaults();

// Flat vs hierarchical training on a two-level corpus whose subclasses hold
// at most one percent of the pixels each. Both modes share the trunk
// topology and training budget; results are mean per-level mPA over seeds.
struct AbCompareResult {
  std::vector<double> hier_l1, hier_l2, flat_l1, flat_l2;
  std::vector<double> hier_l1_iou, hier_l2_iou, flat_l1_iou, flat_l2_iou;
  double hier_l1_mean = 0, hier_l2_mean = 0, flat_l1_mean = 0, flat_l2_mean = 0;
  std::string summary;
};

AbCompareResult run_ab_compare(const std::string& out_dir, const ExperimentOptions& opts);

// Subclass supervision from boxes against the dense oracle: the dense run
// trains on per-pixel subclass labels first, the box run on bounding boxes
// refined online; identical trunks, corpora and budgets. `ratio` is the box
// run's mean level-2 mPA over the dense run's.
struct BboxTransferResult {
  std::vector<double> dense_l2, bbox_l2;
  double dense_mean = 0, bbox_mean = 0, ratio = 0;
  std::string summary;
};

BboxTransferResult run_bbox_transfer(const std::string& out_dir, const ExperimentOptions& opts);

}  // namespace hseg

#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hseg/hierarchy.hpp"
#include "hseg/network.hpp"
#include "hseg/ops.hpp"
#include "hseg/optimizer.hpp"
#include "hseg/synth_data.hpp"
#include "hseg/tensor.hpp"

namespace hseg {

// Supervised pixel sets per classifier: p1 carries per-pixel ground truth,
// p2 carries box-derived pseudo ground truth gated by the parent decisions.
// The two sets are disjoint per classifier; ignore pixels appear in neither.
struct SupervisionSets {
  std::vector<std::vector<PixelTarget>> p1;
  std::vector<std::vector<PixelTarget>> p2;
};

struct LossWeights {
  std::vector<real_t> level_lambda = {real_t(1.0), real_t(0.1), real_t(0.1)};
  real_t decay = real_t(0.00017);
  real_t lambda_for(int level) const;  // levels beyond the list reuse the last entry
};

// Label-to-classifier routing precomputed for a hierarchy and dataset list:
// which node each dataset label binds, and the (classifier, class) chain a
// node's path contributes supervision to.
struct RoutingTable {
  const LabelHierarchy* hierarchy = nullptr;
  std::vector<std::array<int16_t, 256>> label_node;  // [dataset][label id]
  std::vector<std::vector<std::pair<int16_t, int16_t>>> node_chain;

  RoutingTable() = default;
  RoutingTable(const LabelHierarchy& h, const std::vector<std::string>& dataset_names);
};

// Routes a cropped batch into per-classifier supervision sets. `decisions`
// holds the current per-classifier argmax over the batch (no gradients flow
// through it); a box pixel reaches classifier j only when j's parent decides
// j's anchor class at that pixel. Pixels whose per-pixel ground truth already
// supervises j are not duplicated into p2.
SupervisionSets route_supervision(const RoutingTable& table, std::span<const Sample> batch,
                                  std::span<const PseudoMask> pseudo_masks,
                                  const std::vector<std::vector<int>>& decisions,
                                  bool include_pseudo = true);

// Two-term per-classifier loss: mean NLL over p1 plus mean NLL over p2.
// An empty set contributes exactly zero.
Tensor hierarchical_loss(const Tensor& sigma, const std::vector<PixelTarget>& p1,
                         const std::vector<PixelTarget>& p2);

// Lambda-weighted sum of the per-classifier losses plus the weight-decay
// regularizer term. The regularizer enters the objective value as a constant;
// its pull on the parameters is applied by the optimizer.
Tensor total_loss(const std::vector<Tensor>& classifier_losses, const LabelHierarchy& h,
                  const LossWeights& weights, const ParamRegistry& params);

// decay * sum of squared parameters over the decayed registry entries.
real_t weight_decay_value(const ParamRegistry& params, real_t decay);

// Standard one-hot cross entropy over a dense flat-space target map
// (-1 marks unscored pixels).
Tensor flat_loss(const Tensor& sigma, const std::vector<int>& targets);

// Per-pixel flat-space targets for a cropped batch: dense labels first, box
// pseudo masks fill the rest; remaining pixels map to the extra unlabeled
// class when the space carries one, else stay unscored.
std::vector<int> flat_targets(const RoutingTable& table, std::span<const Sample> batch,
                              std::span<const PseudoMask> pseudo_masks, const FlatSpace& space);

struct TrainConfig {
  std::string mode = "hier";  // hier | flat
  int steps = 400;
  real_t lr = real_t(0.01);
  real_t momentum = real_t(0.9);
  real_t weight_decay = real_t(0.00017);
  std::vector<real_t> level_lambda = {real_t(1.0), real_t(0.1), real_t(0.1)};
  std::vector<int> ratios;  // per dataset; empty = all 1
  int crop_h = 48;
  int crop_w = 48;
  int eval_every = 100;
  int log_every = 25;
  int warmup_steps = -1;  // pseudo-GT terms held out; -1 = one epoch of the largest dataset
  int early_stop_patience = 3;  // evaluations without mPA improvement
  uint64_t seed = 1;
  bool flat_unlabeled = false;  // flat mode: add the extra unlabeled class
  real_t weight_ema = real_t(0);  // optional shadow-parameter EMA used at eval; 0 = off
};

struct TrainResult {
  std::map<std::string, double> final_metrics;  // averaged over the last 2 evaluations
  std::string metrics_log_path;
  std::string checkpoint_path;
  int steps_run = 0;
  bool stopped_early = false;
};

// Full training loop: ratio-controlled batches, downscale+crop, shared
// forward, per-classifier heads, decision-gated routing, hierarchical (or
// flat) loss, SGD with momentum, the halved-three-times schedule, periodic
// evaluation with early stopping, and a final checkpoint + metrics log under
// `out_dir`.
TrainResult train(Network& net, const LabelHierarchy& h,
                  const std::vector<LoadedDataset>& datasets, const TrainConfig& cfg,
                  const std::string& out_dir);

}  // namespace hseg

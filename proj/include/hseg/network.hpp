#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hseg/checkpoint.hpp"
#include "hseg/hierarchy.hpp"
#include "hseg/ops.hpp"
#include "hseg/optimizer.hpp"
#include "hseg/tensor.hpp"
#include "hseg/util.hpp"

namespace hseg {

struct NetworkConfig {
  int extractor_blocks = 4;            // residual blocks, split over 3 stages
  std::vector<int> widths = {16, 24, 32};  // channels per stage
  int output_stride = 8;               // 4 or 8; dilation replaces stride
  int rep_depth = 256;                 // shared representation channels
  int bottleneck_width = 16;           // adaptation width per branch
  int branch_dilation = 1;             // adaptation field-of-view control
  std::map<int, int> bottleneck_override;  // classifier id -> width
  std::map<int, int> dilation_override;    // classifier id -> dilation
};

namespace layers {

struct Conv {
  Tensor w;
  int stride = 1;
  int dilation = 1;
  Padding pad = Padding::Same;
  Tensor operator()(const Tensor& x) const { return conv2d(x, w, stride, dilation, pad); }
};

struct BnRelu {
  Tensor gamma, beta;
  Tensor run_mean, run_var;  // buffers
  real_t ema_decay = real_t(0.9);
  Tensor operator()(const Tensor& x, Mode mode, bool relu = true) {
    return batch_norm_relu(x, gamma, beta, run_mean, run_var, mode, ema_decay, relu);
  }
};

// conv-bn-relu, conv-bn, residual add, relu; 1x1 projection when extents or
// channels change.
struct ResidualBlock {
  Conv conv1, conv2;
  BnRelu bn1, bn2;
  std::optional<Conv> proj;
  std::optional<BnRelu> proj_bn;
  Tensor forward(const Tensor& x, Mode mode);
};

}  // namespace layers

// Adaptation subnetwork (3x3 dilated conv to the bottleneck width, BN+ReLU),
// a 1x1 projection to the class count, and the hybrid upsampling stage: a
// 2x2 stride-2 learnable transposed conv followed by bilinear interpolation.
struct ClassifierHead {
  int classifier_id = -1;  // -1 for the flat-baseline head
  int num_classes = 0;
  int parent_classifier = -1;
  int parent_class = -1;
  layers::Conv adapt;
  layers::BnRelu adapt_bn;
  layers::Conv project;  // 1x1, with bias
  Tensor project_bias;
  Tensor up_kernel;  // (C, C, 2, 2)
};

struct Network {
  NetworkConfig cfg;
  layers::Conv stem;
  layers::BnRelu stem_bn;
  std::vector<layers::ResidualBlock> blocks;
  layers::Conv rep_conv;  // 1x1 to rep_depth
  layers::BnRelu rep_bn;
  std::vector<ClassifierHead> heads;  // indexed by classifier id (or single flat head)
  bool flat = false;

  ParamRegistry params;
  std::vector<std::pair<std::string, Tensor>> buffers;  // running stats
  int64_t shared_forward_count = 0;

  // Shared representation at 1/output_stride of the input extents. Input
  // extents must be divisible by the output stride.
  Tensor forward_shared(const Tensor& images, Mode mode);
  // Per-pixel class probabilities of one head at (out_h, out_w).
  Tensor forward_head(ClassifierHead& head, const Tensor& rep, int out_h, int out_w, Mode mode);
  // Convenience: shared pass + every head.
  std::vector<Tensor> forward_all(const Tensor& images, int out_h, int out_w, Mode mode);

  std::vector<NamedArray> state_arrays() const;
  void load_state(const std::vector<NamedArray>& arrays);

  int64_t parameter_count() const { return params.total_size(); }
  std::string describe() const;
};

Network build_network(const LabelHierarchy& h, const NetworkConfig& cfg, uint64_t seed);
// Single head over the flat union space (optionally including the extra
// unlabeled class, already reflected in num_classes).
Network build_flat_network(int num_classes, const NetworkConfig& cfg, uint64_t seed);
// The flat head alone, with the same branch topology as hierarchy heads.
ClassifierHead build_flat_head(int num_classes, const NetworkConfig& cfg, Rng& rng);

// 3x3-stage parameter count of a branch with the given bottleneck width.
int64_t head_adapt_param_count(const NetworkConfig& cfg, int bottleneck_width);

void save_network_checkpoint(const std::string& path, const Network& net,
                             const SgdOptimizer* opt = nullptr, int64_t step = 0);
// Restores parameters/buffers (and optimizer state when `opt` is non-null).
// Returns the stored step counter.
int64_t load_network_checkpoint(const std::string& path, Network& net,
                                SgdOptimizer* opt = nullptr);

}  // namespace hseg

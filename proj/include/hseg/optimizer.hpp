#pragma once

#include <string>
#include <vector>

#include "hseg/tensor.hpp"

namespace hseg {

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool no_decay = false;  // normalization parameters are excluded from decay
};

// Ordered, name-unique registry of trainable parameters. Order is the
// construction order and is stable across runs.
struct ParamRegistry {
  std::vector<ParamEntry> entries;

  void add(const std::string& name, Tensor t, bool no_decay = false);
  Tensor* find(const std::string& name);
  int64_t total_size() const;
  // Allocates zero gradients for parameters untouched by the last backward
  // pass (e.g. heads with no supervised pixels this step).
  void fill_missing_grads();
};

// SGD with momentum and L2 weight decay:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
// Decay is skipped for no_decay entries. Gradients are cleared after the
// step. A trainable parameter without a populated gradient is rejected.
struct SgdOptimizer {
  real_t learning_rate = real_t(0.01);
  real_t momentum = real_t(0.9);
  real_t weight_decay = real_t(0.00017);
  std::vector<std::vector<real_t>> velocity;  // parallel to registry entries

  SgdOptimizer() = default;
  SgdOptimizer(real_t lr, real_t mu, real_t wd)
      : learning_rate(lr), momentum(mu), weight_decay(wd) {}

  void step(ParamRegistry& params);
};

}  // namespace hseg

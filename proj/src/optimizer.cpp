#include "hseg/optimizer.hpp"

#include "hseg/util.hpp"

namespace hseg {

void ParamRegistry::add(const std::string& name, Tensor t, bool no_decay) {
  for (const auto& e : entries) {
    if (e.name == name) throw Error("duplicate parameter name: " + name);
  }
  entries.push_back({name, std::move(t), no_decay});
}

Tensor* ParamRegistry::find(const std::string& name) {
  for (auto& e : entries) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

int64_t ParamRegistry::total_size() const {
  int64_t n = 0;
  for (const auto& e : entries) n += e.tensor.numel();
  return n;
}

void ParamRegistry::fill_missing_grads() {
  for (auto& e : entries) {
    if (!e.tensor.has_grad()) e.tensor.node()->ensure_grad();
  }
}

void SgdOptimizer::step(ParamRegistry& params) {
  if (velocity.size() != params.entries.size()) {
    if (!velocity.empty()) throw Error("optimizer state does not match parameter registry");
    velocity.resize(params.entries.size());
    for (size_t i = 0; i < params.entries.size(); ++i) {
      velocity[i].assign(static_cast<size_t>(params.entries[i].tensor.numel()), real_t(0));
    }
  }
  for (size_t i = 0; i < params.entries.size(); ++i) {
    auto& e = params.entries[i];
    if (!e.tensor.has_grad()) {
      throw Error(strprintf("sgd_step: parameter '%s' has no gradient; run backward first",
                            e.name.c_str()));
    }
    if (velocity[i].size() != e.tensor.grad().size()) {
      throw Error(strprintf("sgd_step: velocity shape mismatch for '%s'", e.name.c_str()));
    }
    auto& v = velocity[i];
    auto& p = e.tensor.values();
    const auto& g = e.tensor.grad();
    const real_t wd = e.no_decay ? real_t(0) : weight_decay;
    for (size_t k = 0; k < v.size(); ++k) {
      v[k] = momentum * v[k] + g[k] + wd * p[k];
      p[k] -= learning_rate * v[k];
    }
    e.tensor.zero_grad();
  }
}

}  // namespace hseg

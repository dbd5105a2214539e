#pragma once

#include <string>
#include <vector>

#include "hseg/tensor.hpp"

namespace hseg {

// One saved array: a parameter, a normalization buffer, or optimizer state.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<real_t> data;
};

// Flat keyed container of named arrays. Binary little-endian layout with the
// magic header "HSEG1".
void save_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> load_checkpoint(const std::string& path);

const NamedArray* find_array(const std::vector<NamedArray>& arrays, const std::string& name);

}  // namespace hseg

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hseg/hierarchy.hpp"
#include "hseg/tensor.hpp"

namespace hseg {

// Per-classifier argmax decisions plus the routing masks identifying which
// pixels each classifier owns. The root owns every pixel; a child classifier
// owns the pixels its parent routed into the child's anchor class.
struct DecisionMaps {
  int n = 0, h = 0, w = 0;
  std::vector<std::vector<int>> decision;    // [classifier][pixel]
  std::vector<std::vector<uint8_t>> routed;  // [classifier][pixel]
  int64_t pixels() const { return static_cast<int64_t>(n) * h * w; }
};

// Argmax per classifier (ties toward the lowest class index) with routing
// masks derived top-down from the parent decisions.
DecisionMaps decide(const std::vector<Tensor>& sigmas, const LabelHierarchy& h);

// Per-pixel node assignment. `level` -1 follows decisions to the finest
// available node; otherwise paths are truncated at the requested level.
struct Segmentation {
  int n = 0, h = 0, w = 0;
  int level = -1;  // -1 = finest
  std::vector<int> node;  // [pixel]
};

Segmentation compose(const DecisionMaps& maps, const LabelHierarchy& h, int level = -1);

struct Palette {
  std::map<int, std::array<uint8_t, 3>> color;  // node -> rgb
};

Palette default_palette(const LabelHierarchy& h);
Palette load_palette(const std::string& path, const LabelHierarchy& h);

// Writes one colorized portable pixmap per image under
// `<dir>/<basename>_<i>.ppm` and returns the per-node pixel histogram.
std::map<int, int64_t> export_segmentation(const Segmentation& seg, const LabelHierarchy& h,
                                           const Palette& palette, const std::string& dir,
                                           const std::string& basename);

std::string format_histogram(const std::map<int, int64_t>& histogram, const LabelHierarchy& h);

}  // namespace hseg

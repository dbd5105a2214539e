#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hseg/hierarchy.hpp"
#include "hseg/tensor.hpp"

namespace hseg {

enum class ShapeKind { Circle, Triangle, Hexagon, Rectangle };

std::string shape_name(ShapeKind k);
ShapeKind shape_from_name(const std::string& s);

// One dataset label. Regions tile the background of a scene; objects are
// small shape-coded figures whose pixel share tracks `share`.
struct LabelDef {
  int id = 0;
  std::string name;          // must name a hierarchy node when binding by spec
  double share = 0.0;        // relative pixel share of the canvas
  bool object = false;
  ShapeKind shape = ShapeKind::Rectangle;
};

struct DatasetSpec {
  std::string name;
  AnnotationType annotation = AnnotationType::Dense;
  // annotation type used for the validation split; defaults to `annotation`.
  std::optional<AnnotationType> val_annotation;
  int train_images = 0;
  int val_images = 0;
  int size_min = 48;
  int size_max = 64;
  int ignore_id = 255;
  std::vector<LabelDef> labels;

  AnnotationType split_annotation(const std::string& split) const;
  DatasetInfo info() const { return {name, annotation}; }
  const LabelDef* find_label(int id) const;
};

DatasetSpec parse_dataset_spec(const std::string& text);
DatasetSpec load_dataset_spec(const std::string& path);
std::string serialize_dataset_spec(const DatasetSpec& spec);

// Box extents are half-open: [x0, x1) x [y0, y1).
struct Box {
  int label = 0;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  ShapeKind shape = ShapeKind::Rectangle;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool empty() const { return width() <= 0 || height() <= 0; }
};

struct Sample {
  Tensor image;  // (3,H,W) in [0,1]
  int h = 0, w = 0;
  int dataset = -1;  // index into the loaded dataset list
  std::optional<std::vector<uint8_t>> dense;  // per-pixel label ids, row-major
  std::vector<Box> boxes;
  int ignore_id = 255;
  bool has_annotation() const { return dense.has_value() || !boxes.empty(); }
};

// Per-pixel labels rasterized from boxes; -1 marks unlabeled pixels.
struct PseudoMask {
  int h = 0, w = 0;
  std::vector<int16_t> label;
  bool from_boxes = true;
  int16_t at(int y, int x) const { return label[static_cast<size_t>(y) * w + x]; }
};

// Renders a deterministic scene for a dataset spec: textured region bands
// for the region labels, small shape-coded objects for the object labels,
// emits annotations of the requested type. Labels bound to inner hierarchy
// nodes are rendered as a random leaf of that subtree but annotated with the
// coarse label.
Sample generate_scene(uint64_t seed, const DatasetSpec& spec, const LabelHierarchy& h);

// Pixel list of a shape inscribed in a box, clipped to (h, w).
std::vector<int32_t> rasterize_shape(const Box& box, int h, int w);

PseudoMask bbox_to_pseudo_mask(const std::vector<Box>& boxes, int h, int w,
                               std::vector<std::string>* warnings = nullptr);

// Connected components of a binary mask under 8-connectivity. Components are
// returned as sorted pixel-index lists, ordered by their smallest pixel.
std::vector<std::vector<int32_t>> separate_instances(const std::vector<uint8_t>& mask, int h,
                                                     int w);

// Aspect-preserving downscale (area interpolation for the image, nearest for
// labels) followed by a random crop to (th, tw). Boxes are rescaled and
// clipped; boxes that fall fully outside the crop are dropped.
Sample downscale_and_crop(const Sample& s, int th, int tw, uint64_t seed, bool center = false);

struct LoadedDataset {
  DatasetSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> val;
  const std::vector<Sample>& split(const std::string& name) const;
};

// Corpus directory layout, one directory per dataset:
//   <dir>/spec                     dataset spec document
//   <dir>/<split>/img_NNNNN.ppm    image
//   <dir>/<split>/lab_NNNNN.pgm    dense labels (when present)
//   <dir>/<split>/box_NNNNN.txt    one `label x0 y0 x1 y1 shape` per line
void write_corpus(const std::string& dir, const DatasetSpec& spec, const LabelHierarchy& h,
                  uint64_t seed);
LoadedDataset load_corpus(const std::string& dir);

// Deterministic ratio-controlled batch composition. Batch k holds exactly
// ratio_d consecutive samples of each dataset d, drawn from per-epoch
// permutations derived from the seed.
class BatchSampler {
 public:
  BatchSampler(std::vector<int> dataset_sizes, std::vector<int> ratios, uint64_t seed);
  // (dataset, sample index) pairs for batch `step`, grouped by dataset.
  std::vector<std::pair<int, int>> batch(int step);
  int batch_size() const;

 private:
  int index_for(int dataset, int64_t position);
  std::vector<int> sizes_;
  std::vector<int> ratios_;
  uint64_t seed_;
  std::vector<int64_t> cached_epoch_;
  std::vector<std::vector<int>> cached_perm_;
};

std::vector<std::pair<int, int>> sample_batch(const std::vector<int>& dataset_sizes,
                                              const std::vector<int>& ratios, int step,
                                              uint64_t seed);

// Per-leaf-node pixel counts over a list of samples (ground-truth nodes).
std::vector<int64_t> corpus_pixel_counts(const LabelHierarchy& h,
                                         const std::vector<LoadedDataset>& datasets,
                                         const std::string& split);

// Scene colors: regions and objects are colored by their hierarchy node so
// the mapping is consistent across datasets. Leaves under the same level-1
// ancestor share a base color and differ by a brightness/hue ladder.
std::array<real_t, 3> node_base_color(const LabelHierarchy& h, int node);
std::array<real_t, 3> leaf_render_color(const LabelHierarchy& h, int leaf);

}  // namespace hseg

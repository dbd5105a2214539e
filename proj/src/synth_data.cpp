#include "hseg/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "hseg/image_io.hpp"
#include "hseg/util.hpp"

namespace fs = std::filesystem;

namespace hseg {

std::string shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Hexagon: return "hexagon";
    case ShapeKind::Rectangle: return "rectangle";
  }
  return "?";
}

ShapeKind shape_from_name(const std::string& s) {
  if (s == "circle") return ShapeKind::Circle;
  if (s == "triangle") return ShapeKind::Triangle;
  if (s == "hexagon") return ShapeKind::Hexagon;
  if (s == "rectangle") return ShapeKind::Rectangle;
  throw Error("unknown shape kind: '" + s + "'");
}

AnnotationType DatasetSpec::split_annotation(const std::string& split) const {
  if (split == "val" && val_annotation.has_value()) return *val_annotation;
  return annotation;
}

const LabelDef* DatasetSpec::find_label(int id) const {
  for (const auto& l : labels) {
    if (l.id == id) return &l;
  }
  return nullptr;
}

DatasetSpec parse_dataset_spec(const std::string& text) {
  DatasetSpec spec;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  bool saw_name = false;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = raw;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(strprintf("dataset spec line %d: expected 'key = value'", lineno));
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "name") {
        spec.name = value;
        saw_name = true;
      } else if (key == "annotation") {
        spec.annotation = annotation_from_name(value);
      } else if (key == "val_annotation") {
        spec.val_annotation = annotation_from_name(value);
      } else if (key == "train_images") {
        spec.train_images = std::stoi(value);
      } else if (key == "val_images") {
        spec.val_images = std::stoi(value);
      } else if (key == "size_min") {
        spec.size_min = std::stoi(value);
      } else if (key == "size_max") {
        spec.size_max = std::stoi(value);
      } else if (key == "ignore") {
        spec.ignore_id = std::stoi(value);
      } else if (key == "label") {
        std::istringstream ls(value);
        LabelDef def;
        std::string kind, shape;
        if (!(ls >> def.id >> def.name >> def.share >> kind)) {
          throw Error("expected 'label = <id> <name> <share> region|object [shape]'");
        }
        if (kind == "object") {
          def.object = true;
          if (ls >> shape) def.shape = shape_from_name(shape);
        } else if (kind != "region") {
          throw Error("label kind must be 'region' or 'object', got '" + kind + "'");
        }
        if (def.id < 0 || def.id > 254) throw Error("label id out of range [0, 254]");
        if (def.share <= 0) throw Error("label share must be positive");
        for (const auto& l : spec.labels) {
          if (l.id == def.id) throw Error(strprintf("duplicate label id %d", def.id));
        }
        spec.labels.push_back(def);
      } else {
        throw Error("unknown key '" + key + "'");
      }
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw Error(strprintf("dataset spec line %d: %s", lineno, e.what()));
    }
  }
  if (!saw_name) throw Error("dataset spec: missing 'name'");
  if (spec.labels.empty()) throw Error("dataset spec: no labels");
  if (spec.size_min < 16 || spec.size_max < spec.size_min) {
    throw Error("dataset spec: invalid size range");
  }
  bool any_object = false;
  for (const auto& l : spec.labels) any_object |= l.object;
  if (spec.annotation == AnnotationType::Bbox && !any_object) {
    throw Error("dataset spec: bbox annotation requires at least one object label");
  }
  return spec;
}

DatasetSpec load_dataset_spec(const std::string& path) {
  try {
    return parse_dataset_spec(read_text_file(path));
  } catch (const Error& e) {
    throw Error(path + ": " + e.what());
  }
}

std::string serialize_dataset_spec(const DatasetSpec& spec) {
  std::ostringstream out;
  out << "name = " << spec.name << "\n";
  out << "annotation = " << annotation_name(spec.annotation) << "\n";
  if (spec.val_annotation) out << "val_annotation = " << annotation_name(*spec.val_annotation) << "\n";
  out << "train_images = " << spec.train_images << "\n";
  out << "val_images = " << spec.val_images << "\n";
  out << "size_min = " << spec.size_min << "\n";
  out << "size_max = " << spec.size_max << "\n";
  out << "ignore = " << spec.ignore_id << "\n";
  for (const auto& l : spec.labels) {
    out << "label = " << l.id << " " << l.name << " " << format_real(l.share) << " "
        << (l.object ? "object" : "region");
    if (l.object) out << " " << shape_name(l.shape);
    out << "\n";
  }
  return out.str();
}

namespace {

std::array<real_t, 3> hsv_to_rgb(double hue, double sat, double val) {
  hue = hue - std::floor(hue);
  double h6 = hue * 6.0;
  int i = static_cast<int>(h6) % 6;
  double f = h6 - std::floor(h6);
  double p = val * (1 - sat);
  double q = val * (1 - sat * f);
  double t = val * (1 - sat * (1 - f));
  double r, g, b;
  switch (i) {
    case 0: r = val; g = t; b = p; break;
    case 1: r = q; g = val; b = p; break;
    case 2: r = p; g = val; b = t; break;
    case 3: r = p; g = q; b = val; break;
    case 4: r = t; g = p; b = val; break;
    default: r = val; g = p; b = q; break;
  }
  return {static_cast<real_t>(r), static_cast<real_t>(g), static_cast<real_t>(b)};
}

// leaves of a subtree in preorder
void collect_leaves(const LabelHierarchy& h, int node, std::vector<int>& out) {
  const auto& n = h.nodes[static_cast<size_t>(node)];
  if (n.children.empty()) {
    out.push_back(node);
    return;
  }
  for (int c : n.children) collect_leaves(h, c, out);
}

}  // namespace

std::array<real_t, 3> node_base_color(const LabelHierarchy& h, int node) {
  int l1 = h.ancestor_at_level(node, 1);
  if (l1 == -1) l1 = node;
  // rank among the root's children gives a well-spread hue
  int slot = h.nodes[static_cast<size_t>(l1)].child_slot;
  double hue = std::fmod(0.12 + slot * 0.61803398875, 1.0);
  return hsv_to_rgb(hue, 0.60, 0.85);
}

std::array<real_t, 3> leaf_render_color(const LabelHierarchy& h, int leaf) {
  int l1 = h.ancestor_at_level(leaf, 1);
  if (l1 == -1) l1 = leaf;
  std::vector<int> leaves;
  collect_leaves(h, l1, leaves);
  size_t pos = 0;
  for (size_t i = 0; i < leaves.size(); ++i) {
    if (leaves[i] == leaf) {
      pos = i;
      break;
    }
  }
  double q = leaves.size() > 1 ? static_cast<double>(pos) / (leaves.size() - 1) : 0.5;
  int slot = h.nodes[static_cast<size_t>(l1)].child_slot;
  double hue = std::fmod(0.12 + slot * 0.61803398875 + 0.10 * (q - 0.5), 1.0);
  double sat = 0.45 + 0.30 * q;
  double val = 0.40 + 0.55 * q;
  return hsv_to_rgb(hue, sat, val);
}

std::vector<int32_t> rasterize_shape(const Box& box, int h, int w) {
  std::vector<int32_t> out;
  if (box.empty()) return out;
  const double x0 = box.x0, y0 = box.y0, x1 = box.x1, y1 = box.y1;
  const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
  const double rx = 0.5 * (x1 - x0), ry = 0.5 * (y1 - y0);
  const int px0 = std::max(box.x0, 0), px1 = std::min(box.x1, w);
  const int py0 = std::max(box.y0, 0), py1 = std::min(box.y1, h);

  auto inside_poly = [](const std::vector<std::pair<double, double>>& poly, double px, double py) {
    // convex polygon, vertices in screen-space clockwise order
    const double eps = 1e-9;
    for (size_t i = 0; i < poly.size(); ++i) {
      auto [ax, ay] = poly[i];
      auto [bx, by] = poly[(i + 1) % poly.size()];
      double cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
      if (cross > eps) return false;
    }
    return true;
  };

  std::vector<std::pair<double, double>> poly;
  switch (box.shape) {
    case ShapeKind::Triangle:
      poly = {{cx, y0}, {x0, y1}, {x1, y1}};
      break;
    case ShapeKind::Hexagon:
      poly = {{x0 + 0.25 * (x1 - x0), y0}, {x0, cy},          {x0 + 0.25 * (x1 - x0), y1},
              {x0 + 0.75 * (x1 - x0), y1}, {x1, cy},          {x0 + 0.75 * (x1 - x0), y0}};
      break;
    default:
      break;
  }

  for (int y = py0; y < py1; ++y) {
    for (int x = px0; x < px1; ++x) {
      double px = x + 0.5, py = y + 0.5;
      bool in = false;
      switch (box.shape) {
        case ShapeKind::Rectangle:
          in = true;
          break;
        case ShapeKind::Circle: {
          double dx = (px - cx) / rx, dy = (py - cy) / ry;
          in = dx * dx + dy * dy <= 1.0 + 1e-9;
          break;
        }
        case ShapeKind::Triangle:
        case ShapeKind::Hexagon:
          in = inside_poly(poly, px, py);
          break;
      }
      if (in) out.push_back(static_cast<int32_t>(y) * w + x);
    }
  }
  return out;
}

PseudoMask bbox_to_pseudo_mask(const std::vector<Box>& boxes, int h, int w,
                               std::vector<std::string>* warnings) {
  PseudoMask mask;
  mask.h = h;
  mask.w = w;
  mask.label.assign(static_cast<size_t>(h) * w, -1);
  for (const auto& box : boxes) {
    if (box.empty()) {
      if (warnings) {
        warnings->push_back(strprintf("skipping degenerate box for label %d at (%d,%d)", box.label,
                                      box.x0, box.y0));
      }
      continue;
    }
    for (int32_t p : rasterize_shape(box, h, w)) {
      mask.label[static_cast<size_t>(p)] = static_cast<int16_t>(box.label);
    }
  }
  return mask;
}

std::vector<std::vector<int32_t>> separate_instances(const std::vector<uint8_t>& mask, int h,
                                                     int w) {
  if (mask.size() != static_cast<size_t>(h) * w) throw Error("separate_instances: size mismatch");
  // two-pass labeling with union-find over the 4 previously-seen neighbors
  std::vector<int32_t> label(mask.size(), 0);
  std::vector<int32_t> parent(1, 0);
  auto find_root = [&](int32_t a) {
    while (parent[static_cast<size_t>(a)] != a) {
      parent[static_cast<size_t>(a)] = parent[static_cast<size_t>(parent[static_cast<size_t>(a)])];
      a = parent[static_cast<size_t>(a)];
    }
    return a;
  };
  auto unite = [&](int32_t a, int32_t b) {
    a = find_root(a);
    b = find_root(b);
    if (a != b) parent[static_cast<size_t>(std::max(a, b))] = std::min(a, b);
  };

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      size_t idx = static_cast<size_t>(y) * w + x;
      if (!mask[idx]) continue;
      int32_t best = 0;
      const int dy[4] = {-1, -1, -1, 0};
      const int dx[4] = {-1, 0, 1, -1};
      for (int k = 0; k < 4; ++k) {
        int ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || nx < 0 || nx >= w) continue;
        int32_t nl = label[static_cast<size_t>(ny) * w + nx];
        if (!nl) continue;
        if (!best) {
          best = nl;
        } else {
          unite(best, nl);
        }
      }
      if (!best) {
        best = static_cast<int32_t>(parent.size());
        parent.push_back(best);
      }
      label[idx] = best;
    }
  }

  std::vector<int32_t> compact(parent.size(), -1);
  std::vector<std::vector<int32_t>> components;
  for (size_t idx = 0; idx < mask.size(); ++idx) {
    if (!label[idx]) continue;
    int32_t root = find_root(label[idx]);
    if (compact[static_cast<size_t>(root)] == -1) {
      compact[static_cast<size_t>(root)] = static_cast<int32_t>(components.size());
      components.emplace_back();
    }
    components[static_cast<size_t>(compact[static_cast<size_t>(root)])].push_back(
        static_cast<int32_t>(idx));
  }
  return components;  // raster order => sorted, ordered by first pixel
}

namespace {

struct ObjectInstance {
  const LabelDef* label;
  int leaf;  // rendered leaf node
  Box box;
};

double shape_fill_factor(ShapeKind k) {
  switch (k) {
    case ShapeKind::Circle: return 0.785;
    case ShapeKind::Triangle: return 0.5;
    case ShapeKind::Hexagon: return 0.75;
    case ShapeKind::Rectangle: return 1.0;
  }
  return 1.0;
}

}  // namespace

Sample generate_scene(uint64_t seed, const DatasetSpec& spec, const LabelHierarchy& h) {
  double total_share = 0;
  for (const auto& l : spec.labels) total_share += l.share;
  if (total_share > 1.0 + 1e-9) {
    throw Error(strprintf("dataset '%s': unsatisfiable frequency profile, shares sum to %.3f > 1",
                          spec.name.c_str(), total_share));
  }
  for (const auto& l : spec.labels) {
    if (h.node_of(spec.name, l.id) == -1) {
      throw Error(strprintf("dataset '%s': label %d (%s) is not bound in the hierarchy",
                            spec.name.c_str(), l.id, l.name.c_str()));
    }
  }

  Rng rng(mix_seed(seed, 0x5ce9e5u));
  const int ih = static_cast<int>(rng.uniform_int(spec.size_min, spec.size_max));
  const int iw = static_cast<int>(rng.uniform_int(spec.size_min, spec.size_max));

  Sample s;
  s.h = ih;
  s.w = iw;
  s.ignore_id = spec.ignore_id;
  s.image = Tensor::zeros({3, ih, iw});
  const int64_t plane = static_cast<int64_t>(ih) * iw;
  auto& img = s.image.values();
  std::vector<int> true_label(static_cast<size_t>(plane), -1);  // dataset label id per pixel

  auto paint = [&](int64_t p, const std::array<real_t, 3>& c, double dim) {
    img[static_cast<size_t>(p)] = static_cast<real_t>(c[0] * dim);
    img[static_cast<size_t>(p + plane)] = static_cast<real_t>(c[1] * dim);
    img[static_cast<size_t>(p + 2 * plane)] = static_cast<real_t>(c[2] * dim);
  };

  // --- background bands ---
  std::vector<const LabelDef*> regions;
  for (const auto& l : spec.labels) {
    if (!l.object) regions.push_back(&l);
  }
  if (regions.empty()) {
    // unlabeled neutral backdrop
    int bands = 3;
    int y = 0;
    for (int b = 0; b < bands; ++b) {
      int y1 = b + 1 == bands ? ih : y + ih / bands;
      double v = 0.30 + 0.18 * b + rng.uniform(-0.04, 0.04);
      for (int yy = y; yy < y1; ++yy)
        for (int xx = 0; xx < iw; ++xx)
          paint(static_cast<int64_t>(yy) * iw + xx, {static_cast<real_t>(v), static_cast<real_t>(v),
                                                     static_cast<real_t>(v)}, 1.0);
      y = y1;
    }
  } else {
    std::vector<double> weights;
    for (const auto* r : regions) weights.push_back(r->share * rng.uniform(0.75, 1.25));
    double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    size_t rot = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(regions.size()) - 1));
    int y = 0;
    double acc = 0;
    for (size_t k = 0; k < regions.size(); ++k) {
      size_t i = (k + rot) % regions.size();
      acc += weights[i] / wsum;
      int y1 = k + 1 == regions.size() ? ih : std::min(ih, static_cast<int>(std::lround(acc * ih)));
      const LabelDef* def = regions[i];
      int node = h.node_of(spec.name, def->id);
      int leaf = node;
      if (!h.nodes[static_cast<size_t>(node)].children.empty()) {
        std::vector<int> leaves;
        collect_leaves(h, node, leaves);
        leaf = leaves[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(leaves.size()) - 1))];
      }
      auto color = leaf_render_color(h, leaf);
      for (int yy = y; yy < y1; ++yy)
        for (int xx = 0; xx < iw; ++xx) {
          int64_t p = static_cast<int64_t>(yy) * iw + xx;
          paint(p, color, 1.0);
          true_label[static_cast<size_t>(p)] = def->id;
        }
      y = y1;
    }
  }

  // --- objects ---
  std::vector<ObjectInstance> objects;
  std::vector<Box> placed;
  const int smin = std::max(5, std::min(7, ih / 8));
  const int smax = std::max(smin + 1, std::min(11, ih / 5));
  double mean_sq = 0;
  for (int v = smin; v <= smax; ++v) mean_sq += static_cast<double>(v) * v;
  mean_sq /= (smax - smin + 1);

  auto place_object = [&](const LabelDef& l, int side) -> bool {
    Box box;
    box.label = l.id;
    box.shape = l.shape;
    for (int attempt = 0; attempt < 30; ++attempt) {
      box.x0 = static_cast<int>(rng.uniform_int(1, iw - side - 1));
      box.y0 = static_cast<int>(rng.uniform_int(1, ih - side - 1));
      box.x1 = box.x0 + side;
      box.y1 = box.y0 + side;
      bool ok = true;
      for (const auto& other : placed) {
        if (box.x0 < other.x1 && other.x0 < box.x1 && box.y0 < other.y1 && other.y0 < box.y1) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      placed.push_back(box);
      int node = h.node_of(spec.name, l.id);
      int leaf = node;
      if (!h.nodes[static_cast<size_t>(node)].children.empty()) {
        std::vector<int> leaves;
        collect_leaves(h, node, leaves);
        leaf = leaves[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(leaves.size()) - 1))];
      }
      objects.push_back({&l, leaf, box});
      return true;
    }
    return false;
  };

  const LabelDef* densest_object = nullptr;
  for (const auto& l : spec.labels) {
    if (!l.object) continue;
    if (!densest_object || l.share > densest_object->share) densest_object = &l;
    double expect = l.share * ih * iw / (shape_fill_factor(l.shape) * mean_sq);
    int count = static_cast<int>(expect);
    if (rng.uniform() < expect - count) ++count;
    for (int k = 0; k < count; ++k) {
      int side = static_cast<int>(rng.uniform_int(smin, smax));
      if (side + 2 >= std::min(ih, iw)) continue;
      place_object(l, side);
    }
  }
  // every scene with object labels shows at least one object, so box
  // annotations are never empty
  if (objects.empty() && densest_object) {
    place_object(*densest_object, smin);
  }

  for (const auto& obj : objects) {
    auto color = leaf_render_color(h, obj.leaf);
    auto pixels = rasterize_shape(obj.box, ih, iw);
    std::vector<uint8_t> member(static_cast<size_t>(plane), 0);
    for (int32_t p : pixels) member[static_cast<size_t>(p)] = 1;
    for (int32_t p : pixels) {
      int y = p / iw, x = p % iw;
      bool border = false;
      for (int dy = -1; dy <= 1 && !border; ++dy)
        for (int dx = -1; dx <= 1 && !border; ++dx) {
          int ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= ih || nx >= iw || !member[static_cast<size_t>(ny) * iw + nx])
            border = true;
        }
      paint(p, color, border ? 0.72 : 1.0);
      true_label[static_cast<size_t>(p)] = obj.label->id;
    }
  }

  // pixel noise
  for (size_t i = 0; i < img.size(); ++i) {
    img[i] = static_cast<real_t>(
        std::clamp(static_cast<double>(img[i]) + rng.uniform(-0.03, 0.03), 0.0, 1.0));
  }

  // --- annotation emission (no RNG from here on) ---
  const AnnotationType ann = spec.annotation;
  if (ann == AnnotationType::Dense || ann == AnnotationType::Mixed) {
    std::vector<uint8_t> dense(static_cast<size_t>(plane), static_cast<uint8_t>(spec.ignore_id));
    for (int64_t p = 0; p < plane; ++p) {
      int lab = true_label[static_cast<size_t>(p)];
      if (lab >= 0) dense[static_cast<size_t>(p)] = static_cast<uint8_t>(lab);
    }
    if (ann == AnnotationType::Mixed) {
      // object pixels are supervised through boxes instead
      for (const auto& obj : objects) {
        for (int32_t p : rasterize_shape(obj.box, ih, iw)) {
          dense[static_cast<size_t>(p)] = static_cast<uint8_t>(spec.ignore_id);
        }
      }
    }
    s.dense = std::move(dense);
  }
  if (ann == AnnotationType::Bbox || ann == AnnotationType::Mixed) {
    // annotation boxes carry a one-pixel margin around the figure, so
    // box-derived masks include background pixels near the border
    for (const auto& obj : objects) {
      Box b = obj.box;
      b.x0 = std::max(0, b.x0 - 1);
      b.y0 = std::max(0, b.y0 - 1);
      b.x1 = std::min(iw, b.x1 + 1);
      b.y1 = std::min(ih, b.y1 + 1);
      s.boxes.push_back(b);
    }
  }
  return s;
}

Sample downscale_and_crop(const Sample& s, int th, int tw, uint64_t seed, bool center) {
  if (th <= 0 || tw <= 0) throw Error("downscale_and_crop: invalid target");
  const int ih = s.h, iw = s.w;
  double scale = std::max(static_cast<double>(th) / ih, static_cast<double>(tw) / iw);
  if (scale > 1.0 + 1e-12) {
    throw Error(strprintf("downscale_and_crop: target %dx%d larger than source %dx%d", th, tw, ih,
                          iw));
  }
  int sh = std::max(th, static_cast<int>(std::lround(ih * scale)));
  int sw = std::max(tw, static_cast<int>(std::lround(iw * scale)));

  // area-interpolated image resize
  Tensor scaled = Tensor::zeros({3, sh, sw});
  {
    const auto& src = s.image.values();
    auto& dst = scaled.values();
    const int64_t splane = static_cast<int64_t>(ih) * iw;
    const int64_t dplane = static_cast<int64_t>(sh) * sw;
    const double fy = static_cast<double>(ih) / sh;
    const double fx = static_cast<double>(iw) / sw;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < sh; ++y) {
        double y0 = y * fy, y1 = (y + 1) * fy;
        int iy0 = static_cast<int>(y0), iy1 = std::min(ih, static_cast<int>(std::ceil(y1)));
        for (int x = 0; x < sw; ++x) {
          double x0 = x * fx, x1 = (x + 1) * fx;
          int ix0 = static_cast<int>(x0), ix1 = std::min(iw, static_cast<int>(std::ceil(x1)));
          double acc = 0, area = 0;
          for (int yy = iy0; yy < iy1; ++yy) {
            double hy = std::min<double>(yy + 1, y1) - std::max<double>(yy, y0);
            for (int xx = ix0; xx < ix1; ++xx) {
              double wx = std::min<double>(xx + 1, x1) - std::max<double>(xx, x0);
              acc += hy * wx * static_cast<double>(src[static_cast<size_t>(c * splane + yy * iw + xx)]);
              area += hy * wx;
            }
          }
          dst[static_cast<size_t>(c * dplane + static_cast<int64_t>(y) * sw + x)] =
              static_cast<real_t>(acc / area);
        }
      }
    }
  }

  Rng rng(mix_seed(seed, 0xc509u));
  int oy = center ? (sh - th) / 2 : static_cast<int>(rng.uniform_int(0, sh - th));
  int ox = center ? (sw - tw) / 2 : static_cast<int>(rng.uniform_int(0, sw - tw));

  Sample out;
  out.h = th;
  out.w = tw;
  out.dataset = s.dataset;
  out.ignore_id = s.ignore_id;
  out.image = Tensor::zeros({3, th, tw});
  {
    const auto& src = scaled.values();
    auto& dst = out.image.values();
    const int64_t splane = static_cast<int64_t>(sh) * sw;
    const int64_t dplane = static_cast<int64_t>(th) * tw;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < th; ++y)
        for (int x = 0; x < tw; ++x)
          dst[static_cast<size_t>(c * dplane + static_cast<int64_t>(y) * tw + x)] =
              src[static_cast<size_t>(c * splane + static_cast<int64_t>(y + oy) * sw + (x + ox))];
  }

  if (s.dense) {
    std::vector<uint8_t> dense(static_cast<size_t>(th) * tw);
    const double fy = static_cast<double>(ih) / sh;
    const double fx = static_cast<double>(iw) / sw;
    for (int y = 0; y < th; ++y)
      for (int x = 0; x < tw; ++x) {
        int sy = std::min(ih - 1, static_cast<int>((y + oy + 0.5) * fy));
        int sx = std::min(iw - 1, static_cast<int>((x + ox + 0.5) * fx));
        dense[static_cast<size_t>(y) * tw + x] = (*s.dense)[static_cast<size_t>(sy) * iw + sx];
      }
    out.dense = std::move(dense);
  }

  const double sy_scale = static_cast<double>(sh) / ih;
  const double sx_scale = static_cast<double>(sw) / iw;
  for (const auto& b : s.boxes) {
    Box nb = b;
    nb.x0 = static_cast<int>(std::lround(b.x0 * sx_scale)) - ox;
    nb.x1 = static_cast<int>(std::lround(b.x1 * sx_scale)) - ox;
    nb.y0 = static_cast<int>(std::lround(b.y0 * sy_scale)) - oy;
    nb.y1 = static_cast<int>(std::lround(b.y1 * sy_scale)) - oy;
    nb.x0 = std::max(nb.x0, 0);
    nb.y0 = std::max(nb.y0, 0);
    nb.x1 = std::min(nb.x1, tw);
    nb.y1 = std::min(nb.y1, th);
    if (!nb.empty()) out.boxes.push_back(nb);
  }
  return out;
}

const std::vector<Sample>& LoadedDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  throw Error("unknown split: " + name);
}

namespace {

void write_sample(const std::string& dir, int index, const Sample& s) {
  write_ppm(strprintf("%s/img_%05d.ppm", dir.c_str(), index), s.image);
  if (s.dense) {
    write_pgm(strprintf("%s/lab_%05d.pgm", dir.c_str(), index), s.h, s.w, *s.dense);
  }
  if (!s.boxes.empty()) {
    std::ostringstream out;
    for (const auto& b : s.boxes) {
      out << b.label << " " << b.x0 << " " << b.y0 << " " << b.x1 << " " << b.y1 << " "
          << shape_name(b.shape) << "\n";
    }
    write_text_file(strprintf("%s/box_%05d.txt", dir.c_str(), index), out.str());
  }
}

}  // namespace

void write_corpus(const std::string& dir, const DatasetSpec& spec, const LabelHierarchy& h,
                  uint64_t seed) {
  fs::create_directories(dir);
  write_text_file(dir + "/spec", serialize_dataset_spec(spec));
  const std::pair<std::string, int> splits[] = {{"train", spec.train_images},
                                                {"val", spec.val_images}};
  int split_tag = 0;
  for (const auto& [split, count] : splits) {
    fs::create_directories(dir + "/" + split);
    DatasetSpec effective = spec;
    effective.annotation = spec.split_annotation(split);
    for (int i = 0; i < count; ++i) {
      Sample s = generate_scene(mix_seed(seed, static_cast<uint64_t>(split_tag), static_cast<uint64_t>(i)),
                                effective, h);
      write_sample(dir + "/" + split, i, s);
    }
    ++split_tag;
  }
}

LoadedDataset load_corpus(const std::string& dir) {
  LoadedDataset ds;
  ds.spec = load_dataset_spec(dir + "/spec");
  for (const std::string split : {"train", "val"}) {
    auto& out = split == "train" ? ds.train : ds.val;
    for (int i = 0;; ++i) {
      std::string img = strprintf("%s/%s/img_%05d.ppm", dir.c_str(), split.c_str(), i);
      if (!fs::exists(img)) break;
      Sample s;
      s.image = read_ppm(img);
      s.h = s.image.dim(1);
      s.w = s.image.dim(2);
      s.ignore_id = ds.spec.ignore_id;
      std::string lab = strprintf("%s/%s/lab_%05d.pgm", dir.c_str(), split.c_str(), i);
      if (fs::exists(lab)) {
        int lh = 0, lw = 0;
        auto gray = read_pgm(lab, lh, lw);
        if (lh != s.h || lw != s.w) throw Error("label map extents mismatch: " + lab);
        s.dense = std::move(gray);
      }
      std::string boxp = strprintf("%s/%s/box_%05d.txt", dir.c_str(), split.c_str(), i);
      if (fs::exists(boxp)) {
        std::istringstream in(read_text_file(boxp));
        std::string line;
        while (std::getline(in, line)) {
          line = trim(line);
          if (line.empty()) continue;
          std::istringstream ls(line);
          Box b;
          std::string shape;
          if (!(ls >> b.label >> b.x0 >> b.y0 >> b.x1 >> b.y1 >> shape)) {
            throw Error("malformed box line in " + boxp + ": " + line);
          }
          b.shape = shape_from_name(shape);
          if (b.x0 < 0 || b.y0 < 0 || b.x1 > s.w || b.y1 > s.h || b.empty()) {
            throw Error("box outside the image in " + boxp + ": " + line);
          }
          s.boxes.push_back(b);
        }
      }
      if (!s.has_annotation()) throw Error("sample without annotation: " + img);
      out.push_back(std::move(s));
    }
  }
  return ds;
}

BatchSampler::BatchSampler(std::vector<int> dataset_sizes, std::vector<int> ratios, uint64_t seed)
    : sizes_(std::move(dataset_sizes)), ratios_(std::move(ratios)), seed_(seed) {
  if (sizes_.size() != ratios_.size()) {
    throw Error("sample_batch: ratios length must equal dataset count");
  }
  for (size_t d = 0; d < sizes_.size(); ++d) {
    if (ratios_[d] < 0) throw Error("sample_batch: negative ratio");
    if (ratios_[d] > 0 && sizes_[d] <= 0) {
      throw Error(strprintf("sample_batch: dataset %zu is empty", d));
    }
  }
  cached_epoch_.assign(sizes_.size(), -1);
  cached_perm_.resize(sizes_.size());
}

int BatchSampler::batch_size() const {
  int n = 0;
  for (int r : ratios_) n += r;
  return n;
}

int BatchSampler::index_for(int dataset, int64_t position) {
  const int n = sizes_[static_cast<size_t>(dataset)];
  int64_t epoch = position / n;
  int64_t pos = position % n;
  if (cached_epoch_[static_cast<size_t>(dataset)] != epoch) {
    auto& perm = cached_perm_[static_cast<size_t>(dataset)];
    perm.resize(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(mix_seed(seed_, static_cast<uint64_t>(dataset) * 0x9d7fu + 17u,
                     static_cast<uint64_t>(epoch)));
    rng.shuffle(perm);
    cached_epoch_[static_cast<size_t>(dataset)] = epoch;
  }
  return cached_perm_[static_cast<size_t>(dataset)][static_cast<size_t>(pos)];
}

std::vector<std::pair<int, int>> BatchSampler::batch(int step) {
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<size_t>(batch_size()));
  for (size_t d = 0; d < sizes_.size(); ++d) {
    for (int i = 0; i < ratios_[d]; ++i) {
      int64_t position = static_cast<int64_t>(step) * ratios_[d] + i;
      out.emplace_back(static_cast<int>(d), index_for(static_cast<int>(d), position));
    }
  }
  return out;
}

std::vector<std::pair<int, int>> sample_batch(const std::vector<int>& dataset_sizes,
                                              const std::vector<int>& ratios, int step,
                                              uint64_t seed) {
  BatchSampler sampler(dataset_sizes, ratios, seed);
  return sampler.batch(step);
}

std::vector<int64_t> corpus_pixel_counts(const LabelHierarchy& h,
                                         const std::vector<LoadedDataset>& datasets,
                                         const std::string& split) {
  std::vector<int64_t> counts(h.nodes.size(), 0);
  for (const auto& ds : datasets) {
    for (const auto& s : ds.split(split)) {
      if (s.dense) {
        for (uint8_t lab : *s.dense) {
          if (lab == s.ignore_id) continue;
          int node = h.node_of(ds.spec.name, lab);
          if (node != -1) ++counts[static_cast<size_t>(node)];
        }
      } else if (!s.boxes.empty()) {
        PseudoMask mask = bbox_to_pseudo_mask(s.boxes, s.h, s.w);
        for (int16_t lab : mask.label) {
          if (lab < 0) continue;
          int node = h.node_of(ds.spec.name, lab);
          if (node != -1) ++counts[static_cast<size_t>(node)];
        }
      }
    }
  }
  return counts;
}

}  // namespace hseg

#include "hseg/inference.hpp"

#include <filesystem>
#include <sstream>

#include "hseg/image_io.hpp"
#include "hseg/ops.hpp"
#include "hseg/synth_data.hpp"
#include "hseg/util.hpp"

namespace hseg {

DecisionMaps decide(const std::vector<Tensor>& sigmas, const LabelHierarchy& h) {
  if (sigmas.size() != h.classifiers.size()) {
    throw Error(strprintf("decide: %zu sigma maps for %zu classifiers", sigmas.size(),
                          h.classifiers.size()));
  }
  if (sigmas.empty()) throw Error("decide: hierarchy has no classifiers");
  DecisionMaps maps;
  maps.n = sigmas[0].dim(0);
  maps.h = sigmas[0].dim(2);
  maps.w = sigmas[0].dim(3);
  for (size_t j = 0; j < sigmas.size(); ++j) {
    const auto& s = sigmas[j];
    if (s.dim(0) != maps.n || s.dim(2) != maps.h || s.dim(3) != maps.w) {
      throw Error("decide: sigma maps do not share spatial extents");
    }
    if (s.dim(1) != h.classifiers[j].num_classes) {
      throw Error(strprintf("decide: classifier %zu expects %d channels, got %d", j,
                            h.classifiers[j].num_classes, s.dim(1)));
    }
  }

  const int64_t npix = maps.pixels();
  maps.decision.resize(sigmas.size());
  maps.routed.assign(sigmas.size(), std::vector<uint8_t>(static_cast<size_t>(npix), 0));
  // classifiers are stored in preorder, so parents precede children
  for (size_t j = 0; j < sigmas.size(); ++j) {
    maps.decision[j] = channel_argmax(sigmas[j]);
    const auto& cls = h.classifiers[j];
    if (cls.parent_classifier < 0) {
      std::fill(maps.routed[j].begin(), maps.routed[j].end(), uint8_t(1));
    } else {
      const auto& parent_routed = maps.routed[static_cast<size_t>(cls.parent_classifier)];
      const auto& parent_decision = maps.decision[static_cast<size_t>(cls.parent_classifier)];
      for (int64_t p = 0; p < npix; ++p) {
        maps.routed[j][static_cast<size_t>(p)] =
            parent_routed[static_cast<size_t>(p)] &&
            parent_decision[static_cast<size_t>(p)] == cls.parent_class;
      }
    }
  }
  return maps;
}

Segmentation compose(const DecisionMaps& maps, const LabelHierarchy& h, int level) {
  if (level != -1 && (level < 1 || level > h.max_level())) {
    throw Error(strprintf("compose: level %d outside the tree (max level %d)", level,
                          h.max_level()));
  }
  Segmentation seg;
  seg.n = maps.n;
  seg.h = maps.h;
  seg.w = maps.w;
  seg.level = level;
  const int64_t npix = maps.pixels();
  seg.node.resize(static_cast<size_t>(npix));
  for (int64_t p = 0; p < npix; ++p) {
    int node = 0;  // root
    while (true) {
      const auto& n = h.nodes[static_cast<size_t>(node)];
      if (level != -1 && n.level >= level) break;
      if (n.classifier == -1) break;  // no finer decision available
      int y = maps.decision[static_cast<size_t>(n.classifier)][static_cast<size_t>(p)];
      node = n.children[static_cast<size_t>(y)];
    }
    seg.node[static_cast<size_t>(p)] = node;
  }
  return seg;
}

Palette default_palette(const LabelHierarchy& h) {
  Palette p;
  for (const auto& n : h.nodes) {
    std::array<real_t, 3> c =
        n.children.empty() ? leaf_render_color(h, n.index) : node_base_color(h, n.index);
    p.color[n.index] = {static_cast<uint8_t>(c[0] * 255), static_cast<uint8_t>(c[1] * 255),
                        static_cast<uint8_t>(c[2] * 255)};
  }
  return p;
}

Palette load_palette(const std::string& path, const LabelHierarchy& h) {
  Palette p;
  std::istringstream in(read_text_file(path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name;
    int r, g, b;
    if (!(ls >> name >> r >> g >> b)) {
      throw Error(strprintf("palette line %d: expected '<node> <r> <g> <b>'", lineno));
    }
    int node = h.find(name);
    if (node == -1) throw Error(strprintf("palette line %d: unknown node '%s'", lineno, name.c_str()));
    p.color[node] = {static_cast<uint8_t>(r), static_cast<uint8_t>(g), static_cast<uint8_t>(b)};
  }
  return p;
}

std::map<int, int64_t> export_segmentation(const Segmentation& seg, const LabelHierarchy& h,
                                           const Palette& palette, const std::string& dir,
                                           const std::string& basename) {
  if (seg.h <= 0 || seg.w <= 0 || seg.n <= 0) {
    throw Error("export: empty segmentation");
  }
  std::map<int, int64_t> histogram;
  for (int node : seg.node) ++histogram[node];
  for (const auto& [node, count] : histogram) {
    if (!palette.color.count(node)) {
      throw Error(strprintf("export: palette has no entry for node '%s'",
                            h.nodes[static_cast<size_t>(node)].name.c_str()));
    }
  }
  std::filesystem::create_directories(dir);
  const int64_t plane = static_cast<int64_t>(seg.h) * seg.w;
  for (int i = 0; i < seg.n; ++i) {
    std::vector<uint8_t> rgb(static_cast<size_t>(plane) * 3);
    for (int64_t p = 0; p < plane; ++p) {
      const auto& c = palette.color.at(seg.node[static_cast<size_t>(i * plane + p)]);
      rgb[static_cast<size_t>(p * 3 + 0)] = c[0];
      rgb[static_cast<size_t>(p * 3 + 1)] = c[1];
      rgb[static_cast<size_t>(p * 3 + 2)] = c[2];
    }
    std::string path = strprintf("%s/%s_%d.ppm", dir.c_str(), basename.c_str(), i);
    write_ppm_rgb(path, seg.h, seg.w, rgb);
  }
  return histogram;
}

std::string format_histogram(const std::map<int, int64_t>& histogram, const LabelHierarchy& h) {
  std::ostringstream out;
  int64_t total = 0;
  for (const auto& [node, count] : histogram) total += count;
  for (const auto& [node, count] : histogram) {
    out << strprintf("  %-28s %10lld  (%.2f%%)\n",
                     h.nodes[static_cast<size_t>(node)].name.c_str(),
                     static_cast<long long>(count), 100.0 * count / total);
  }
  out << strprintf("  %-28s %10lld\n", "total", static_cast<long long>(total));
  return out.str();
}

}  // namespace hseg

#include "hseg/evaluation.hpp"

#include <algorithm>

#include "hseg/inference.hpp"
#include "hseg/ops.hpp"
#include "hseg/training.hpp"
#include "hseg/util.hpp"

namespace hseg {

namespace {

std::string level_key(int level) {
  return strprintf("level%d", level);
}

}  // namespace

EvalResult evaluate(Network& net, const LabelHierarchy& h,
                    const std::vector<LoadedDataset>& datasets, const std::string& split,
                    const EvalOptions& opts) {
  const bool flat_mode = opts.mode == "flat";
  if (!flat_mode && opts.mode != "hier") {
    throw Error("evaluate: mode must be 'hier' or 'flat'");
  }
  std::vector<std::string> names;
  for (const auto& d : datasets) names.push_back(d.spec.name);
  RoutingTable table(h, names);

  const int max_level = h.max_level();
  // node-space matrices per level; one extra column bucket for predictions
  // outside the node space (the flat unlabeled class)
  const int node_space = static_cast<int>(h.nodes.size()) + 1;
  const int other_bucket = node_space - 1;
  std::map<int, ConfusionAccumulator> level_acc;
  for (int l = 1; l <= max_level; ++l) level_acc.emplace(l, ConfusionAccumulator(node_space));
  std::vector<ConfusionAccumulator> classifier_acc;
  for (const auto& c : h.classifiers) classifier_acc.emplace_back(c.num_classes);
  ConfusionAccumulator flat_acc(opts.flat_space.size() > 0 ? opts.flat_space.size() : 1);

  std::vector<int> node_to_flat(h.nodes.size(), -1);
  if (flat_mode) {
    for (size_t i = 0; i < opts.flat_space.nodes.size(); ++i) {
      node_to_flat[static_cast<size_t>(opts.flat_space.nodes[i])] = static_cast<int>(i);
    }
  }
  std::vector<int> protocol_subclasses;
  if (flat_mode && opts.flat_protocol) {
    if (opts.protocol_superclass < 0) throw Error("evaluate: protocol superclass not set");
    if (node_to_flat[static_cast<size_t>(opts.protocol_superclass)] < 0) {
      throw Error("evaluate: the protocol superclass is not part of the flat space");
    }
    for (size_t i = 0; i < opts.flat_space.nodes.size(); ++i) {
      int node = opts.flat_space.nodes[i];
      if (node != opts.protocol_superclass &&
          h.is_ancestor(opts.protocol_superclass, node)) {
        protocol_subclasses.push_back(static_cast<int>(i));
      }
    }
  }

  NoGradGuard no_grad;
  for (size_t d = 0; d < datasets.size(); ++d) {
    for (const Sample& raw : datasets[d].split(split)) {
      if (!raw.dense) continue;  // box-only samples cannot be scored per pixel
      Sample s = downscale_and_crop(raw, opts.crop_h, opts.crop_w, 0, /*center=*/true);
      s.dataset = static_cast<int>(d);
      Tensor images = Tensor::zeros({1, 3, s.h, s.w});
      images.values() = s.image.values();
      const int64_t plane = static_cast<int64_t>(s.h) * s.w;
      const auto& binding = table.label_node[d];

      if (flat_mode) {
        Tensor rep = net.forward_shared(images, Mode::Eval);
        Tensor sigma = net.forward_head(net.heads[0], rep, s.h, s.w, Mode::Eval);
        // ground truth in flat indices (-1 = unscored)
        std::vector<int> gt(static_cast<size_t>(plane), -1);
        for (int64_t p = 0; p < plane; ++p) {
          uint8_t lab = (*s.dense)[static_cast<size_t>(p)];
          if (lab == s.ignore_id) continue;
          int16_t node = binding[lab];
          if (node >= 0) gt[static_cast<size_t>(p)] = node_to_flat[static_cast<size_t>(node)];
        }
        std::vector<int> pred;
        if (opts.flat_protocol) {
          pred = flat_protocol_score(gt, sigma,
                                     node_to_flat[static_cast<size_t>(opts.protocol_superclass)],
                                     protocol_subclasses);
        } else {
          pred = channel_argmax(sigma);
        }
        for (int64_t p = 0; p < plane; ++p) {
          int g = gt[static_cast<size_t>(p)];
          if (g < 0) continue;
          flat_acc.add(g, pred[static_cast<size_t>(p)]);
          // per-level view: truncate both sides to the level
          int gnode = opts.flat_space.nodes[static_cast<size_t>(g)];
          int pidx = pred[static_cast<size_t>(p)];
          int pnode = pidx < static_cast<int>(opts.flat_space.nodes.size())
                          ? opts.flat_space.nodes[static_cast<size_t>(pidx)]
                          : -1;
          for (int l = 1; l <= max_level; ++l) {
            int grow = h.ancestor_at_level(gnode, l);
            if (grow == -1) continue;  // ground truth coarser than this level
            int col = other_bucket;
            if (pnode != -1) {
              int trunc = h.ancestor_at_level(pnode, l);
              col = trunc != -1 ? trunc : pnode;  // coarser predictions stay as-is
            }
            level_acc.at(l).add(grow, col);
          }
        }
      } else {
        Tensor rep = net.forward_shared(images, Mode::Eval);
        std::vector<std::vector<int>> decisions;
        for (auto& head : net.heads) {
          decisions.push_back(
              channel_argmax(net.forward_head(head, rep, s.h, s.w, Mode::Eval)));
        }
        for (int64_t p = 0; p < plane; ++p) {
          uint8_t lab = (*s.dense)[static_cast<size_t>(p)];
          if (lab == s.ignore_id) continue;
          int16_t node = binding[lab];
          if (node < 0) continue;
          for (const auto& [j, target] : table.node_chain[static_cast<size_t>(node)]) {
            int decided = decisions[static_cast<size_t>(j)][static_cast<size_t>(p)];
            classifier_acc[static_cast<size_t>(j)].add(target, decided);
            const auto& cls = h.classifiers[static_cast<size_t>(j)];
            const auto& owner = h.nodes[static_cast<size_t>(cls.node)];
            level_acc.at(cls.level)
                .add(owner.children[static_cast<size_t>(target)],
                     owner.children[static_cast<size_t>(decided)]);
          }
        }
      }
    }
  }

  EvalResult res;
  double level_mpa_sum = 0, level_miou_sum = 0;
  int levels_scored = 0;
  for (int l = 1; l <= max_level; ++l) {
    std::vector<int> level_classes;
    for (const auto& n : h.nodes) {
      if (n.level == l) level_classes.push_back(n.index);
    }
    if (level_classes.empty()) continue;
    MetricResult r = mpa_miou(level_acc.at(l), level_classes);
    if (r.scored_classes == 0) continue;
    res.metrics[level_key(l) + ".mpa"] = r.mpa;
    res.metrics[level_key(l) + ".miou"] = r.miou;
    level_mpa_sum += r.mpa;
    level_miou_sum += r.miou;
    ++levels_scored;
    res.per_level.emplace(l, std::move(r));
  }
  if (levels_scored > 0) {
    res.overall_mpa = level_mpa_sum / levels_scored;
    res.overall_miou = level_miou_sum / levels_scored;
  }
  res.metrics["overall.mpa"] = res.overall_mpa;
  res.metrics["overall.miou"] = res.overall_miou;

  if (flat_mode) {
    if (flat_acc.total() > 0) {
      std::vector<int> all;
      for (int c = 0; c < flat_acc.num_classes; ++c) all.push_back(c);
      res.flat = mpa_miou(flat_acc, all);
      res.metrics["flat.mpa"] = res.flat.mpa;
      res.metrics["flat.miou"] = res.flat.miou;
    }
  } else {
    for (size_t j = 0; j < classifier_acc.size(); ++j) {
      if (classifier_acc[j].total() == 0) continue;
      std::vector<int> all;
      for (int c = 0; c < classifier_acc[j].num_classes; ++c) all.push_back(c);
      MetricResult r = mpa_miou(classifier_acc[j], all);
      res.metrics[strprintf("classifier%zu.mpa", j)] = r.mpa;
      res.metrics[strprintf("classifier%zu.miou", j)] = r.miou;
      res.per_classifier.emplace(static_cast<int>(j), std::move(r));
    }
  }
  return res;
}

}  // namespace hseg

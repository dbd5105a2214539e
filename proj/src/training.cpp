#include "hseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "hseg/evaluation.hpp"
#include "hseg/util.hpp"

namespace hseg {

real_t LossWeights::lambda_for(int level) const {
  if (level_lambda.empty()) return real_t(1);
  size_t i = std::min(static_cast<size_t>(std::max(level, 1)) - 1, level_lambda.size() - 1);
  return level_lambda[i];
}

RoutingTable::RoutingTable(const LabelHierarchy& h, const std::vector<std::string>& dataset_names)
    : hierarchy(&h) {
  label_node.resize(dataset_names.size());
  for (size_t d = 0; d < dataset_names.size(); ++d) {
    label_node[d].fill(-1);
    auto it = h.dataset_bindings.find(dataset_names[d]);
    if (it == h.dataset_bindings.end()) {
      throw Error("routing: dataset '" + dataset_names[d] + "' has no bindings");
    }
    for (const auto& b : it->second) {
      label_node[d][static_cast<size_t>(b.label_id)] = static_cast<int16_t>(b.node);
    }
  }
  node_chain.resize(h.nodes.size());
  for (const auto& n : h.nodes) {
    for (const auto& step : path_encode(h, n.index)) {
      node_chain[static_cast<size_t>(n.index)].emplace_back(
          static_cast<int16_t>(step.classifier), static_cast<int16_t>(step.class_index));
    }
  }
}

SupervisionSets route_supervision(const RoutingTable& table, std::span<const Sample> batch,
                                  std::span<const PseudoMask> pseudo_masks,
                                  const std::vector<std::vector<int>>& decisions,
                                  bool include_pseudo) {
  const LabelHierarchy& h = *table.hierarchy;
  SupervisionSets sets;
  sets.p1.resize(h.classifiers.size());
  sets.p2.resize(h.classifiers.size());
  if (batch.empty()) return sets;

  const int ih = batch[0].h, iw = batch[0].w;
  const int64_t plane = static_cast<int64_t>(ih) * iw;
  std::vector<int8_t> dense_hits(h.classifiers.size());

  for (size_t i = 0; i < batch.size(); ++i) {
    const Sample& s = batch[i];
    if (s.h != ih || s.w != iw) throw Error("route_supervision: batch extents differ");
    if (s.dataset < 0 || static_cast<size_t>(s.dataset) >= table.label_node.size()) {
      throw Error("route_supervision: sample has no dataset assignment");
    }
    const auto& binding = table.label_node[static_cast<size_t>(s.dataset)];
    const PseudoMask* mask =
        i < pseudo_masks.size() && !pseudo_masks[i].label.empty() ? &pseudo_masks[i] : nullptr;

    for (int64_t p = 0; p < plane; ++p) {
      const int32_t pixel = static_cast<int32_t>(static_cast<int64_t>(i) * plane + p);
      std::fill(dense_hits.begin(), dense_hits.end(), 0);
      if (s.dense) {
        uint8_t lab = (*s.dense)[static_cast<size_t>(p)];
        if (lab != s.ignore_id) {
          int16_t node = binding[lab];
          if (node >= 0) {
            for (const auto& [j, target] : table.node_chain[static_cast<size_t>(node)]) {
              sets.p1[static_cast<size_t>(j)].push_back({pixel, target});
              dense_hits[static_cast<size_t>(j)] = 1;
            }
          }
        }
      }
      if (include_pseudo && mask) {
        int16_t lab = mask->label[static_cast<size_t>(p)];
        if (lab >= 0) {
          int16_t node = binding[static_cast<size_t>(lab)];
          if (node >= 0) {
            for (const auto& [j, target] : table.node_chain[static_cast<size_t>(node)]) {
              if (dense_hits[static_cast<size_t>(j)]) continue;  // p1 wins per classifier
              const auto& cls = h.classifiers[static_cast<size_t>(j)];
              if (cls.parent_classifier >= 0) {
                const auto& parent = decisions[static_cast<size_t>(cls.parent_classifier)];
                if (parent[static_cast<size_t>(pixel)] != cls.parent_class) continue;
              }
              sets.p2[static_cast<size_t>(j)].push_back({pixel, target});
            }
          }
        }
      }
    }
  }
  return sets;
}

Tensor hierarchical_loss(const Tensor& sigma, const std::vector<PixelTarget>& p1,
                         const std::vector<PixelTarget>& p2) {
  return add(nll_mean(sigma, p1), nll_mean(sigma, p2));
}

real_t weight_decay_value(const ParamRegistry& params, real_t decay) {
  double acc = 0;
  for (const auto& e : params.entries) {
    if (e.no_decay) continue;
    for (real_t v : e.tensor.values()) acc += static_cast<double>(v) * v;
  }
  return static_cast<real_t>(decay * acc);
}

Tensor total_loss(const std::vector<Tensor>& classifier_losses, const LabelHierarchy& h,
                  const LossWeights& weights, const ParamRegistry& params) {
  if (classifier_losses.size() != h.classifiers.size()) {
    throw Error("total_loss: one loss per classifier expected");
  }
  Tensor total = Tensor::scalar(weight_decay_value(params, weights.decay));
  for (size_t j = 0; j < classifier_losses.size(); ++j) {
    real_t lambda = weights.lambda_for(h.classifiers[j].level);
    if (lambda == real_t(0)) continue;
    total = add(total, scale(classifier_losses[j], lambda));
  }
  return total;
}

Tensor flat_loss(const Tensor& sigma, const std::vector<int>& targets) {
  const int64_t npix = static_cast<int64_t>(sigma.dim(0)) * sigma.dim(2) * sigma.dim(3);
  if (static_cast<int64_t>(targets.size()) != npix) {
    throw Error("flat_loss: target map does not match sigma extents");
  }
  std::vector<PixelTarget> px;
  px.reserve(targets.size());
  for (int64_t p = 0; p < npix; ++p) {
    int t = targets[static_cast<size_t>(p)];
    if (t >= 0) px.push_back({static_cast<int32_t>(p), t});
  }
  return nll_mean(sigma, px);
}

std::vector<int> flat_targets(const RoutingTable& table, std::span<const Sample> batch,
                              std::span<const PseudoMask> pseudo_masks, const FlatSpace& space) {
  if (batch.empty()) return {};
  const int ih = batch[0].h, iw = batch[0].w;
  const int64_t plane = static_cast<int64_t>(ih) * iw;
  std::vector<int> node_to_flat(table.hierarchy->nodes.size(), -1);
  for (size_t i = 0; i < space.nodes.size(); ++i) {
    node_to_flat[static_cast<size_t>(space.nodes[i])] = static_cast<int>(i);
  }
  std::vector<int> targets(static_cast<size_t>(batch.size()) * plane, -1);
  for (size_t i = 0; i < batch.size(); ++i) {
    const Sample& s = batch[i];
    const auto& binding = table.label_node[static_cast<size_t>(s.dataset)];
    const PseudoMask* mask =
        i < pseudo_masks.size() && !pseudo_masks[i].label.empty() ? &pseudo_masks[i] : nullptr;
    for (int64_t p = 0; p < plane; ++p) {
      size_t out = static_cast<size_t>(i) * plane + static_cast<size_t>(p);
      int node = -1;
      if (s.dense) {
        uint8_t lab = (*s.dense)[static_cast<size_t>(p)];
        if (lab != s.ignore_id) node = binding[lab];
      }
      if (node < 0 && mask) {
        int16_t lab = mask->label[static_cast<size_t>(p)];
        if (lab >= 0) node = binding[static_cast<size_t>(lab)];
      }
      if (node >= 0) {
        targets[out] = node_to_flat[static_cast<size_t>(node)];
      } else if (space.with_unlabeled) {
        targets[out] = space.unlabeled_index();
      }
    }
  }
  return targets;
}

namespace {

struct MetricsLog {
  std::string text;
  void line(int step, const std::string& split, const std::string& metric, double value) {
    text += strprintf("%d, %s, %s, %s\n", step, split.c_str(), metric.c_str(),
                      format_real(value).c_str());
  }
};

Tensor stack_images(std::span<const Sample> batch) {
  const int n = static_cast<int>(batch.size());
  const int h = batch[0].h, w = batch[0].w;
  Tensor out = Tensor::zeros({n, 3, h, w});
  const int64_t sample_size = static_cast<int64_t>(3) * h * w;
  for (int i = 0; i < n; ++i) {
    if (batch[static_cast<size_t>(i)].image.numel() != sample_size) {
      throw Error("stack_images: inconsistent sample extents");
    }
    std::copy(batch[static_cast<size_t>(i)].image.values().begin(),
              batch[static_cast<size_t>(i)].image.values().end(),
              out.values().begin() + i * sample_size);
  }
  return out;
}

}  // namespace

TrainResult train(Network& net, const LabelHierarchy& h,
                  const std::vector<LoadedDataset>& datasets, const TrainConfig& cfg,
                  const std::string& out_dir) {
  if (datasets.empty()) throw Error("train: no datasets");
  const bool flat_mode = cfg.mode == "flat";
  if (!flat_mode && cfg.mode != "hier") {
    throw Error("train: mode must be 'hier' or 'flat', got '" + cfg.mode + "'");
  }

  std::vector<DatasetInfo> infos;
  std::vector<std::string> names;
  for (const auto& d : datasets) {
    infos.push_back(d.spec.info());
    names.push_back(d.spec.name);
  }
  ValidationReport report = validate(h, infos);
  if (!report.ok()) {
    throw Error("hierarchy validation failed; training blocked:\n" + report.to_string(h));
  }

  std::vector<int> ratios = cfg.ratios;
  if (ratios.empty()) ratios.assign(datasets.size(), 1);
  if (ratios.size() != datasets.size()) {
    throw Error("train: ratios length must equal dataset count");
  }

  RoutingTable table(h, names);
  FlatSpace space;
  if (flat_mode) {
    space = flatten_union(h, cfg.flat_unlabeled);
    if (net.heads.size() != 1 || net.heads[0].num_classes != space.size()) {
      throw Error(strprintf("train: flat network head has %d classes, union space needs %d",
                            net.heads.empty() ? 0 : net.heads[0].num_classes, space.size()));
    }
  } else if (net.heads.size() != h.classifiers.size()) {
    throw Error("train: network heads do not match the hierarchy classifiers");
  }

  std::vector<int> sizes;
  for (const auto& d : datasets) sizes.push_back(static_cast<int>(d.train.size()));
  BatchSampler sampler(sizes, ratios, mix_seed(cfg.seed, 0xba7c4u));

  int warmup = cfg.warmup_steps;
  if (warmup < 0) {
    // one epoch of the largest dataset
    warmup = 0;
    for (size_t d = 0; d < datasets.size(); ++d) {
      if (ratios[d] <= 0) continue;
      int steps_per_epoch = (sizes[d] + ratios[d] - 1) / ratios[d];
      warmup = std::max(warmup, steps_per_epoch);
    }
  }

  LossWeights weights;
  weights.level_lambda = cfg.level_lambda;
  weights.decay = cfg.weight_decay;
  SgdOptimizer opt(cfg.lr, cfg.momentum, cfg.weight_decay);

  // optional shadow parameters for evaluation
  std::vector<std::vector<real_t>> ema_shadow;
  if (cfg.weight_ema > 0) {
    for (const auto& e : net.params.entries) ema_shadow.push_back(e.tensor.values());
  }

  EvalOptions eval_opts;
  eval_opts.mode = cfg.mode;
  eval_opts.crop_h = cfg.crop_h;
  eval_opts.crop_w = cfg.crop_w;
  eval_opts.flat_space = space;

  MetricsLog log;
  std::vector<std::map<std::string, double>> eval_history;
  double best_mpa = -1;
  int stall = 0;
  bool stopped_early = false;
  real_t lr_logged = -1;
  const int milestones[3] = {cfg.steps / 4, cfg.steps / 2, 3 * cfg.steps / 4};

  auto run_eval = [&](int step) {
    std::vector<std::vector<real_t>> kept;
    if (!ema_shadow.empty()) {
      for (size_t i = 0; i < net.params.entries.size(); ++i) {
        kept.push_back(net.params.entries[i].tensor.values());
        net.params.entries[i].tensor.values() = ema_shadow[i];
      }
    }
    EvalResult ev = evaluate(net, h, datasets, "val", eval_opts);
    if (!kept.empty()) {
      for (size_t i = 0; i < net.params.entries.size(); ++i) {
        net.params.entries[i].tensor.values() = kept[i];
      }
    }
    for (const auto& [key, value] : ev.metrics) log.line(step, "val", key, value);
    eval_history.push_back(ev.metrics);
    double mpa = ev.overall_mpa;
    if (mpa > best_mpa + 1e-12) {
      best_mpa = mpa;
      stall = 0;
    } else {
      ++stall;
    }
  };

  int step = 0;
  for (; step < cfg.steps; ++step) {
    real_t lr_now = cfg.lr;
    for (int m : milestones) {
      if (m > 0 && step >= m) lr_now = lr_now * real_t(0.5);
    }
    if (lr_now != lr_logged) {
      log.line(step, "train", "lr", static_cast<double>(lr_now));
      lr_logged = lr_now;
    }
    opt.learning_rate = lr_now;

    auto picks = sampler.batch(step);
    std::vector<Sample> batch;
    std::vector<PseudoMask> masks;
    batch.reserve(picks.size());
    for (size_t slot = 0; slot < picks.size(); ++slot) {
      auto [d, index] = picks[slot];
      Sample s = downscale_and_crop(datasets[static_cast<size_t>(d)].train[static_cast<size_t>(index)],
                                    cfg.crop_h, cfg.crop_w,
                                    mix_seed(cfg.seed, static_cast<uint64_t>(step),
                                             static_cast<uint64_t>(slot)));
      s.dataset = d;
      masks.push_back(s.boxes.empty() ? PseudoMask{}
                                      : bbox_to_pseudo_mask(s.boxes, s.h, s.w));
      batch.push_back(std::move(s));
    }

    Tensor images = stack_images(batch);
    Tensor total;
    if (flat_mode) {
      Tensor rep = net.forward_shared(images, Mode::Train);
      Tensor sigma = net.forward_head(net.heads[0], rep, cfg.crop_h, cfg.crop_w, Mode::Train);
      std::vector<int> targets = flat_targets(table, batch, masks, space);
      total = add(flat_loss(sigma, targets),
                  Tensor::scalar(weight_decay_value(net.params, weights.decay)));
    } else {
      Tensor rep = net.forward_shared(images, Mode::Train);
      std::vector<Tensor> sigmas;
      sigmas.reserve(net.heads.size());
      for (auto& head : net.heads) {
        sigmas.push_back(net.forward_head(head, rep, cfg.crop_h, cfg.crop_w, Mode::Train));
      }
      std::vector<std::vector<int>> decisions;
      decisions.reserve(sigmas.size());
      for (const auto& s : sigmas) decisions.push_back(channel_argmax(s));
      SupervisionSets sets =
          route_supervision(table, batch, masks, decisions, step >= warmup);
      std::vector<Tensor> losses;
      losses.reserve(sigmas.size());
      for (size_t j = 0; j < sigmas.size(); ++j) {
        losses.push_back(hierarchical_loss(sigmas[j], sets.p1[j], sets.p2[j]));
      }
      total = total_loss(losses, h, weights, net.params);
    }

    double loss_value = static_cast<double>(total.item());
    if (std::isnan(loss_value) || std::isinf(loss_value)) {
      throw Error(strprintf("training diverged: loss is %f at step %d (seed %llu)", loss_value,
                            step, static_cast<unsigned long long>(cfg.seed)));
    }
    backward(total);
    net.params.fill_missing_grads();
    opt.step(net.params);

    if (!ema_shadow.empty()) {
      for (size_t i = 0; i < net.params.entries.size(); ++i) {
        const auto& v = net.params.entries[i].tensor.values();
        auto& sh = ema_shadow[i];
        for (size_t k = 0; k < sh.size(); ++k) {
          sh[k] = cfg.weight_ema * sh[k] + (1 - cfg.weight_ema) * v[k];
        }
      }
    }

    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      log.line(step, "train", "loss.total", loss_value);
    }
    if (cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps)) {
      run_eval(step);
      if (stall >= cfg.early_stop_patience) {
        stopped_early = true;
        ++step;
        break;
      }
    }
  }

  if (eval_history.empty()) run_eval(step > 0 ? step - 1 : 0);

  TrainResult result;
  result.steps_run = step;
  result.stopped_early = stopped_early;
  // final figures: average of the last two evaluations
  const auto& last = eval_history.back();
  const auto& prev = eval_history.size() > 1 ? eval_history[eval_history.size() - 2] : last;
  for (const auto& [key, value] : last) {
    auto it = prev.find(key);
    double avg = it != prev.end() ? 0.5 * (value + it->second) : value;
    result.final_metrics[key] = avg;
    log.line(step, "final", key, avg);
  }

  std::filesystem::create_directories(out_dir);
  result.metrics_log_path = out_dir + "/metrics.log";
  write_text_file(result.metrics_log_path, log.text);
  result.checkpoint_path = out_dir + "/model.ckpt";
  save_network_checkpoint(result.checkpoint_path, net, &opt, step);
  return result;
}

}  // namespace hseg

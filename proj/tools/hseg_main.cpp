#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "hseg/evaluation.hpp"
#include "hseg/experiment.hpp"
#include "hseg/hierarchy.hpp"
#include "hseg/image_io.hpp"
#include "hseg/inference.hpp"
#include "hseg/metrics.hpp"
#include "hseg/network.hpp"
#include "hseg/synth_data.hpp"
#include "hseg/training.hpp"
#include "hseg/util.hpp"

namespace fs = std::filesystem;
using namespace hseg;

namespace {

constexpr const char* kVersion = "hseg 0.1.0";

struct NetFlags {
  int blocks = 4;
  std::vector<int> widths = {12, 24, 32};
  int output_stride = 4;
  int rep_depth = 32;
  int bottleneck = 24;
  int dilation = 1;

  void attach(CLI::App* cmd) {
    cmd->add_option("--blocks", blocks, "extractor residual blocks");
    cmd->add_option("--widths", widths, "stage widths")->expected(1, 8);
    cmd->add_option("--stride", output_stride, "output stride (4 or 8)");
    cmd->add_option("--rep-depth", rep_depth, "shared representation depth");
    cmd->add_option("--bottleneck", bottleneck, "branch bottleneck width");
    cmd->add_option("--branch-dilation", dilation, "branch dilation");
  }
  NetworkConfig config() const {
    NetworkConfig cfg;
    cfg.extractor_blocks = blocks;
    cfg.widths = widths;
    cfg.output_stride = output_stride;
    cfg.rep_depth = rep_depth;
    cfg.bottleneck_width = bottleneck;
    cfg.branch_dilation = dilation;
    return cfg;
  }
};

std::vector<LoadedDataset> load_datasets(const std::string& data_dir,
                                         const std::vector<std::string>& names) {
  std::vector<LoadedDataset> datasets;
  for (const auto& name : names) {
    datasets.push_back(load_corpus(data_dir + "/" + name));
    if (datasets.back().spec.name != name) {
      throw Error(strprintf("corpus directory '%s' holds dataset '%s'", name.c_str(),
                            datasets.back().spec.name.c_str()));
    }
  }
  return datasets;
}

void write_manifest(const std::string& out_dir, const std::string& subcommand,
                    const std::map<std::string, std::string>& entries) {
  std::ostringstream ss;
  ss << "version = " << kVersion << "\n";
  ss << "subcommand = " << subcommand << "\n";
  for (const auto& [key, value] : entries) ss << key << " = " << value << "\n";
  fs::create_directories(out_dir);
  write_text_file(out_dir + "/manifest.txt", ss.str());
}

std::string join_csv(const std::vector<std::string>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += v[i];
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical per-pixel classification over heterogeneous datasets"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.set_config("--config", "", "key = value config file; flags override it");

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus from dataset specs");
  std::string gen_hierarchy, gen_out;
  std::vector<std::string> gen_specs;
  uint64_t gen_seed = 0;
  gen->add_option("--hierarchy", gen_hierarchy, "hierarchy config")->required();
  gen->add_option("--spec", gen_specs, "dataset spec file(s)")->required();
  gen->add_option("--out", gen_out, "output corpus directory")->required();
  gen->add_option("--seed", gen_seed, "generation seed")->required();

  // ---- inspect-hierarchy ----
  auto* inspect = app.add_subcommand("inspect-hierarchy", "print the label tree and bindings");
  std::string inspect_path;
  inspect->add_option("hierarchy", inspect_path, "hierarchy config")->required();

  // ---- describe ----
  auto* describe = app.add_subcommand("describe", "network topology summary");
  std::string describe_hierarchy_path;
  bool describe_flat = false;
  NetFlags describe_net;
  describe->add_option("--hierarchy", describe_hierarchy_path, "hierarchy config")->required();
  describe->add_flag("--flat", describe_flat, "flat-baseline head over the union space");
  describe_net.attach(describe);

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train a hierarchical or flat network");
  std::string tr_hierarchy, tr_data, tr_out, tr_mode = "hier";
  std::vector<std::string> tr_datasets;
  std::vector<int> tr_ratios;
  NetFlags tr_net;
  TrainConfig tr_cfg;
  uint64_t tr_seed = 0;
  std::vector<double> tr_lambda = {1.0, 0.1, 0.1};
  double tr_lr = 0.01, tr_momentum = 0.9, tr_decay = 0.00017, tr_ema = 0.0;
  tr->add_option("--hierarchy", tr_hierarchy, "hierarchy config")->required();
  tr->add_option("--data", tr_data, "corpus root directory")->required();
  tr->add_option("--datasets", tr_datasets, "dataset names under the corpus root")->required();
  tr->add_option("--ratios", tr_ratios, "per-dataset samples per batch");
  tr->add_option("--mode", tr_mode, "hier | flat")->check(CLI::IsMember({"hier", "flat"}));
  tr->add_option("--out", tr_out, "run output directory")->required();
  tr->add_option("--seed", tr_seed, "training seed")->required();
  tr->add_option("--steps", tr_cfg.steps, "training steps");
  tr->add_option("--lr", tr_lr, "initial learning rate (halved three times)");
  tr->add_option("--momentum", tr_momentum, "SGD momentum");
  tr->add_option("--decay", tr_decay, "L2 weight decay");
  tr->add_option("--lambda", tr_lambda, "per-level loss weights")->expected(1, 8);
  tr->add_option("--crop", tr_cfg.crop_h, "training crop (square)");
  tr->add_option("--eval-every", tr_cfg.eval_every, "evaluation period in steps");
  tr->add_option("--warmup", tr_cfg.warmup_steps,
                 "steps without pseudo-GT terms (-1 = one epoch of the largest dataset)");
  tr->add_option("--patience", tr_cfg.early_stop_patience,
                 "evaluations without improvement before stopping");
  tr->add_option("--weight-ema", tr_ema, "shadow-parameter EMA decay for eval (0 = off)");
  bool tr_flat_unlabeled = false;
  tr->add_flag("--flat-unlabeled", tr_flat_unlabeled, "flat mode: add an extra unlabeled class");
  tr_net.attach(tr);

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a corpus split");
  std::string ev_hierarchy, ev_data, ev_ckpt, ev_split = "val", ev_mode = "hier";
  std::vector<std::string> ev_datasets;
  NetFlags ev_net;
  int ev_crop = 48;
  bool ev_flat_unlabeled = false, ev_protocol = false;
  std::string ev_protocol_super;
  int64_t ev_min_pixels = -1;
  ev->add_option("--hierarchy", ev_hierarchy, "hierarchy config")->required();
  ev->add_option("--data", ev_data, "corpus root directory")->required();
  ev->add_option("--datasets", ev_datasets, "dataset names")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--split", ev_split, "train | val")->check(CLI::IsMember({"train", "val"}));
  ev->add_option("--mode", ev_mode, "hier | flat")->check(CLI::IsMember({"hier", "flat"}));
  ev->add_option("--crop", ev_crop, "evaluation crop (square, center)");
  ev->add_flag("--flat-unlabeled", ev_flat_unlabeled, "flat space carries the unlabeled class");
  ev->add_flag("--second-choice", ev_protocol,
               "flat protocol: rescue superclass hits by the runner-up subclass");
  ev->add_option("--superclass", ev_protocol_super, "superclass node for --second-choice");
  ev->add_option("--min-pixels", ev_min_pixels,
                 "report only classes above this pixel count on the scored split");
  std::string ev_out;
  ev->add_option("--out", ev_out, "also write the report and a manifest here");
  ev_net.attach(ev);

  // ---- infer ----
  auto* in = app.add_subcommand("infer", "hierarchical inference on images");
  std::string in_hierarchy, in_ckpt, in_out, in_palette;
  std::vector<std::string> in_images;
  NetFlags in_net;
  int in_level = -1;
  bool in_finest = false;
  in->add_option("--hierarchy", in_hierarchy, "hierarchy config")->required();
  in->add_option("--checkpoint", in_ckpt, "checkpoint file")->required();
  in->add_option("images", in_images, "input image(s), portable pixmap")->required();
  in->add_option("--out", in_out, "output directory")->required();
  auto* level_opt = in->add_option("--level", in_level, "truncate decisions at this level");
  auto* finest_flag = in->add_flag("--finest", in_finest, "follow decisions to the finest node");
  level_opt->excludes(finest_flag);
  in->add_option("--palette", in_palette, "palette file (node r g b per line)");
  in_net.attach(in);

  // ---- experiment ----
  auto* ex = app.add_subcommand("experiment", "scripted comparisons");
  ex->require_subcommand(1);
  auto* ab = ex->add_subcommand("ab-compare",
                                "flat vs hierarchical on an imbalanced two-level corpus");
  auto* bt = ex->add_subcommand("bbox-transfer",
                                "subclass supervision from boxes vs the dense oracle");
  ExperimentOptions ab_opts = ab_compare_defaults();
  ExperimentOptions bt_opts = bbox_transfer_defaults();
  std::string ab_out, bt_out;
  for (auto [cmd, opts, out] : {std::tuple{ab, &ab_opts, &ab_out}, std::tuple{bt, &bt_opts, &bt_out}}) {
    cmd->add_option("--out", *out, "output directory")->required();
    cmd->add_option("--seeds", opts->seeds, "number of seeds");
    cmd->add_option("--steps", opts->steps, "training steps per run");
    cmd->add_option("--lr", opts->lr, "initial learning rate");
    cmd->add_option("--base-seed", opts->base_seed, "first seed");
    cmd->add_option("--train-images", opts->train_images, "per-dataset training images");
    cmd->add_option("--val-images", opts->val_images, "per-dataset validation images");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      LabelHierarchy h = load_hierarchy(gen_hierarchy);
      std::vector<DatasetInfo> infos;
      std::vector<DatasetSpec> specs;
      for (const auto& path : gen_specs) {
        specs.push_back(load_dataset_spec(path));
        infos.push_back(specs.back().info());
      }
      ValidationReport report = validate(h, infos);
      if (!report.ok()) {
        std::cerr << report.to_string(h);
        return 1;
      }
      for (const auto& spec : specs) {
        std::printf("generating %s (%d train, %d val)\n", spec.name.c_str(), spec.train_images,
                    spec.val_images);
        write_corpus(gen_out + "/" + spec.name, spec, h,
                     mix_seed(gen_seed, std::hash<std::string>{}(spec.name)));
      }
      std::map<std::string, std::string> manifest = {
          {"hierarchy", gen_hierarchy}, {"seed", std::to_string(gen_seed)}};
      for (size_t i = 0; i < gen_specs.size(); ++i) {
        manifest["spec." + specs[i].name] = gen_specs[i];
      }
      write_manifest(gen_out, "gen-data", manifest);
      return 0;
    }

    if (*inspect) {
      LabelHierarchy h = load_hierarchy(inspect_path);
      std::cout << describe_hierarchy(h);
      return 0;
    }

    if (*describe) {
      LabelHierarchy h = load_hierarchy(describe_hierarchy_path);
      if (describe_flat) {
        Network net = build_flat_network(flatten_union(h).size(), describe_net.config(), 1);
        std::cout << net.describe();
      } else {
        Network net = build_network(h, describe_net.config(), 1);
        std::cout << net.describe();
      }
      return 0;
    }

    if (*tr) {
      LabelHierarchy h = load_hierarchy(tr_hierarchy);
      auto datasets = load_datasets(tr_data, tr_datasets);
      tr_cfg.mode = tr_mode;
      tr_cfg.ratios = tr_ratios;
      tr_cfg.crop_w = tr_cfg.crop_h;
      tr_cfg.seed = tr_seed;
      tr_cfg.lr = static_cast<real_t>(tr_lr);
      tr_cfg.momentum = static_cast<real_t>(tr_momentum);
      tr_cfg.weight_decay = static_cast<real_t>(tr_decay);
      tr_cfg.level_lambda.assign(tr_lambda.begin(), tr_lambda.end());
      tr_cfg.flat_unlabeled = tr_flat_unlabeled;
      tr_cfg.weight_ema = static_cast<real_t>(tr_ema);

      Network net = tr_mode == "flat"
                        ? build_flat_network(flatten_union(h, tr_flat_unlabeled).size(),
                                             tr_net.config(), tr_seed)
                        : build_network(h, tr_net.config(), tr_seed);
      std::map<std::string, std::string> manifest = {
          {"hierarchy", tr_hierarchy},
          {"data", tr_data},
          {"datasets", join_csv(tr_datasets)},
          {"mode", tr_mode},
          {"seed", std::to_string(tr_seed)},
          {"steps", std::to_string(tr_cfg.steps)},
          {"lr", format_real(tr_lr)},
          {"momentum", format_real(tr_momentum)},
          {"decay", format_real(tr_decay)},
          {"crop", std::to_string(tr_cfg.crop_h)},
          {"parameters", std::to_string(net.parameter_count())},
      };
      write_manifest(tr_out, "train", manifest);
      TrainResult result = train(net, h, datasets, tr_cfg, tr_out);
      std::printf("trained %d steps%s\n", result.steps_run,
                  result.stopped_early ? " (stopped early)" : "");
      for (const auto& [key, value] : result.final_metrics) {
        std::printf("final %s = %s\n", key.c_str(), format_real(value).c_str());
      }
      std::printf("checkpoint: %s\nmetrics log: %s\n", result.checkpoint_path.c_str(),
                  result.metrics_log_path.c_str());
      return 0;
    }

    if (*ev) {
      LabelHierarchy h = load_hierarchy(ev_hierarchy);
      auto datasets = load_datasets(ev_data, ev_datasets);
      EvalOptions opts;
      opts.mode = ev_mode;
      opts.crop_h = ev_crop;
      opts.crop_w = ev_crop;
      Network net = ev_mode == "flat"
                        ? build_flat_network(flatten_union(h, ev_flat_unlabeled).size(),
                                             ev_net.config(), 1)
                        : build_network(h, ev_net.config(), 1);
      load_network_checkpoint(ev_ckpt, net);
      if (ev_mode == "flat") {
        opts.flat_space = flatten_union(h, ev_flat_unlabeled);
        if (ev_protocol) {
          if (ev_protocol_super.empty()) {
            throw Error("--second-choice needs --superclass <node>");
          }
          int node = h.find(ev_protocol_super);
          if (node == -1) throw Error("unknown superclass node: " + ev_protocol_super);
          opts.flat_protocol = true;
          opts.protocol_superclass = node;
        }
      }
      EvalResult result = evaluate(net, h, datasets, ev_split, opts);

      // optional pixel-count class filter for the reported tables
      std::vector<int> keep;
      if (ev_min_pixels >= 0) {
        auto counts = corpus_pixel_counts(h, datasets, ev_split);
        keep = filter_evaluated_classes({{ev_split, counts}}, ev_min_pixels, true);
      }
      auto node_kept = [&](int node) {
        if (ev_min_pixels < 0) return true;
        for (int k : keep) {
          if (k == node) return true;
        }
        return false;
      };

      if (ev_mode == "flat") {
        std::vector<std::string> names;
        for (int node : opts.flat_space.nodes) {
          names.push_back(h.nodes[static_cast<size_t>(node)].name);
        }
        if (opts.flat_space.with_unlabeled) names.push_back("unlabeled");
        MetricResult table = result.flat;
        if (ev_min_pixels >= 0) {
          std::vector<ClassScore> filtered;
          for (const auto& s : table.per_class) {
            if (node_kept(opts.flat_space.nodes[static_cast<size_t>(s.cls)])) {
              filtered.push_back(s);
            }
          }
          table.per_class = filtered;
        }
        std::cout << format_metric_table(table, names);
        for (const auto& s : table.per_class) {
          std::printf("%s, %s, %s\n", names[static_cast<size_t>(s.cls)].c_str(),
                      format_real(s.pa).c_str(), format_real(s.iou).c_str());
        }
      } else {
        for (const auto& [j, table] : result.per_classifier) {
          const auto& cls = h.classifiers[static_cast<size_t>(j)];
          const auto& owner = h.nodes[static_cast<size_t>(cls.node)];
          std::vector<std::string> names;
          for (int child : owner.children) {
            names.push_back(h.nodes[static_cast<size_t>(child)].name);
          }
          MetricResult shown = table;
          if (ev_min_pixels >= 0) {
            std::vector<ClassScore> filtered;
            for (const auto& s : shown.per_class) {
              if (node_kept(owner.children[static_cast<size_t>(s.cls)])) filtered.push_back(s);
            }
            shown.per_class = filtered;
          }
          std::printf("classifier %d (%s), level %d\n", j, owner.name.c_str(), cls.level);
          std::cout << format_metric_table(shown, names);
          for (const auto& s : shown.per_class) {
            std::printf("%s, %s, %s\n", names[static_cast<size_t>(s.cls)].c_str(),
                        format_real(s.pa).c_str(), format_real(s.iou).c_str());
          }
        }
      }
      std::ostringstream summary;
      for (const auto& [key, value] : result.metrics) {
        summary << "summary " << key << " = " << format_real(value) << "\n";
      }
      std::fputs(summary.str().c_str(), stdout);
      if (!ev_out.empty()) {
        write_manifest(ev_out, "eval",
                       {{"hierarchy", ev_hierarchy},
                        {"data", ev_data},
                        {"datasets", join_csv(ev_datasets)},
                        {"checkpoint", ev_ckpt},
                        {"split", ev_split},
                        {"mode", ev_mode}});
        write_text_file(ev_out + "/summary.txt", summary.str());
      }
      return 0;
    }

    if (*in) {
      LabelHierarchy h = load_hierarchy(in_hierarchy);
      Network net = build_network(h, in_net.config(), 1);
      load_network_checkpoint(in_ckpt, net);
      Palette palette =
          in_palette.empty() ? default_palette(h) : load_palette(in_palette, h);
      write_manifest(in_out, "infer",
                     {{"hierarchy", in_hierarchy},
                      {"checkpoint", in_ckpt},
                      {"images", join_csv(in_images)},
                      {"level", in_finest || level_opt->count() == 0
                                    ? std::string("finest")
                                    : std::to_string(in_level)}});
      int level = in_finest || level_opt->count() == 0 ? -1 : in_level;
      for (size_t idx = 0; idx < in_images.size(); ++idx) {
        Tensor img = read_ppm(in_images[idx]);
        int ih = img.dim(1), iw = img.dim(2);
        int stride = in_net.config().output_stride;
        int ch = ih - ih % stride, cw = iw - iw % stride;
        if (ch == 0 || cw == 0) throw Error("image too small: " + in_images[idx]);
        Tensor batch = Tensor::zeros({1, 3, ch, cw});
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x) {
              batch.values()[static_cast<size_t>((c * ch + y) * cw + x)] =
                  img.values()[static_cast<size_t>((c * ih + y) * iw + x)];
            }
        NoGradGuard ng;
        std::vector<Tensor> sigmas = net.forward_all(batch, ch, cw, Mode::Eval);
        DecisionMaps maps = decide(sigmas, h);
        std::string base = fs::path(in_images[idx]).stem().string();
        // finest plus every level, or the single requested level
        std::vector<int> levels;
        if (level == -1) {
          levels.push_back(-1);
          for (int l = 1; l <= h.max_level(); ++l) levels.push_back(l);
        } else {
          levels.push_back(level);
        }
        for (int l : levels) {
          Segmentation seg = compose(maps, h, l);
          std::string name = l == -1 ? base + "_finest" : strprintf("%s_level%d", base.c_str(), l);
          auto histogram = export_segmentation(seg, h, palette, in_out, name);
          std::printf("%s:\n%s", name.c_str(), format_histogram(histogram, h).c_str());
        }
      }
      return 0;
    }

    if (*ab) {
      write_manifest(ab_out, "experiment ab-compare",
                     {{"seeds", std::to_string(ab_opts.seeds)},
                      {"steps", std::to_string(ab_opts.steps)},
                      {"lr", format_real(ab_opts.lr)},
                      {"base_seed", std::to_string(ab_opts.base_seed)}});
      auto result = run_ab_compare(ab_out, ab_opts);
      std::cout << result.summary;
      return 0;
    }
    if (*bt) {
      write_manifest(bt_out, "experiment bbox-transfer",
                     {{"seeds", std::to_string(bt_opts.seeds)},
                      {"steps", std::to_string(bt_opts.steps)},
                      {"lr", format_real(bt_opts.lr)},
                      {"base_seed", std::to_string(bt_opts.base_seed)}});
      auto result = run_bbox_transfer(bt_out, bt_opts);
      std::cout << result.summary;
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#include "hseg/network.hpp"

#include <cmath>
#include <sstream>

#include "hseg/util.hpp"

namespace hseg {

namespace layers {

Tensor ResidualBlock::forward(const Tensor& x, Mode mode) {
  Tensor y = bn1(conv1(x), mode, true);
  y = bn2(conv2(y), mode, false);
  Tensor skip = x;
  if (proj) skip = (*proj_bn)((*proj)(skip), mode, false);
  return relu(add(y, skip));
}

}  // namespace layers

namespace {

struct Builder {
  ParamRegistry* params;
  std::vector<std::pair<std::string, Tensor>>* buffers;
  Rng rng;

  Tensor conv_weight(const std::string& name, int co, int ci, int kh, int kw) {
    Tensor w = Tensor::zeros({co, ci, kh, kw}, true);
    real_t bound = static_cast<real_t>(1.0 / std::sqrt(static_cast<double>(ci) * kh * kw));
    for (auto& v : w.values()) v = static_cast<real_t>(rng.uniform(-bound, bound));
    params->add(name, w);
    return w;
  }

  layers::Conv conv(const std::string& name, int co, int ci, int k, int stride, int dilation,
                    Padding pad = Padding::Same) {
    layers::Conv c;
    c.w = conv_weight(name + ".w", co, ci, k, k);
    c.stride = stride;
    c.dilation = dilation;
    c.pad = pad;
    return c;
  }

  layers::BnRelu bn(const std::string& name, int channels) {
    layers::BnRelu b;
    b.gamma = Tensor::full({channels}, 1, true);
    b.beta = Tensor::zeros({channels}, true);
    b.run_mean = Tensor::zeros({channels});
    b.run_var = Tensor::full({channels}, 1);
    params->add(name + ".gamma", b.gamma, /*no_decay=*/true);
    params->add(name + ".beta", b.beta, /*no_decay=*/true);
    buffers->emplace_back(name + ".run_mean", b.run_mean);
    buffers->emplace_back(name + ".run_var", b.run_var);
    return b;
  }

  layers::ResidualBlock block(const std::string& name, int ci, int co, int stride, int dilation) {
    layers::ResidualBlock blk;
    blk.conv1 = conv(name + ".conv1", co, ci, 3, stride, dilation);
    blk.bn1 = bn(name + ".bn1", co);
    blk.conv2 = conv(name + ".conv2", co, co, 3, 1, dilation);
    blk.bn2 = bn(name + ".bn2", co);
    if (ci != co || stride != 1) {
      blk.proj = conv(name + ".proj", co, ci, 1, stride, 1);
      blk.proj_bn = bn(name + ".proj_bn", co);
    }
    return blk;
  }

  ClassifierHead head(const std::string& name, int num_classes, const NetworkConfig& cfg,
                      int classifier_id) {
    ClassifierHead hd;
    hd.classifier_id = classifier_id;
    hd.num_classes = num_classes;
    int bw = cfg.bottleneck_width;
    int dil = cfg.branch_dilation;
    if (auto it = cfg.bottleneck_override.find(classifier_id); it != cfg.bottleneck_override.end())
      bw = it->second;
    if (auto it = cfg.dilation_override.find(classifier_id); it != cfg.dilation_override.end())
      dil = it->second;
    hd.adapt = conv(name + ".adapt", bw, cfg.rep_depth, 3, 1, dil);
    hd.adapt_bn = bn(name + ".adapt_bn", bw);
    hd.project = conv(name + ".project", num_classes, bw, 1, 1, 1);
    hd.project_bias = Tensor::zeros({num_classes}, true);
    params->add(name + ".project.b", hd.project_bias);
    hd.up_kernel = conv_weight(name + ".up.w", num_classes, num_classes, 2, 2);
    return hd;
  }
};

void split_blocks(int total, int out[3]) {
  out[0] = total / 3;
  out[1] = (total - out[0]) / 2;
  out[2] = total - out[0] - out[1];
  for (int i = 0; i < 3; ++i) out[i] = std::max(out[i], 1);
}

Network build_trunk(const NetworkConfig& cfg, uint64_t seed) {
  if (cfg.output_stride != 4 && cfg.output_stride != 8) {
    throw Error(strprintf("output stride must be 4 or 8, got %d", cfg.output_stride));
  }
  if (cfg.widths.empty()) throw Error("network config needs at least one stage width");
  if (cfg.extractor_blocks < 3) {
    throw Error("extractor needs at least 3 blocks, one per stage");
  }
  Network net;
  net.cfg = cfg;
  Builder b{&net.params, &net.buffers, Rng(mix_seed(seed, 0xae77u))};

  auto width = [&](int stage) {
    size_t i = std::min(static_cast<size_t>(stage), cfg.widths.size() - 1);
    return cfg.widths[i];
  };

  net.stem = b.conv("stem", width(0), 3, 3, 2, 1);
  net.stem_bn = b.bn("stem.bn", width(0));

  // stage strides/dilations: stem /2 plus two more /2 for output stride 8;
  // the final stage trades stride for dilation
  int strides[3], dilations[3];
  if (cfg.output_stride == 8) {
    strides[0] = 2; strides[1] = 2; strides[2] = 1;
    dilations[0] = 1; dilations[1] = 1; dilations[2] = 2;
  } else {
    strides[0] = 2; strides[1] = 1; strides[2] = 1;
    dilations[0] = 1; dilations[1] = 2; dilations[2] = 4;
  }
  int counts[3];
  split_blocks(cfg.extractor_blocks, counts);
  int ci = width(0);
  for (int stage = 0; stage < 3; ++stage) {
    int co = width(stage);
    for (int k = 0; k < counts[stage]; ++k) {
      std::string name = strprintf("s%d.b%d", stage + 1, k);
      net.blocks.push_back(
          b.block(name, ci, co, k == 0 ? strides[stage] : 1, dilations[stage]));
      ci = co;
    }
  }
  net.rep_conv = b.conv("rep", cfg.rep_depth, ci, 1, 1, 1);
  net.rep_bn = b.bn("rep.bn", cfg.rep_depth);
  // heads are appended by the specific builders; reuse the same stream
  net.shared_forward_count = 0;
  return net;
}

}  // namespace

Network build_network(const LabelHierarchy& h, const NetworkConfig& cfg, uint64_t seed) {
  Network net = build_trunk(cfg, seed);
  Builder b{&net.params, &net.buffers, Rng(mix_seed(seed, 0x11b3u))};
  for (const auto& c : h.classifiers) {
    ClassifierHead hd = b.head(strprintf("head%d", c.id), c.num_classes, cfg, c.id);
    hd.parent_classifier = c.parent_classifier;
    hd.parent_class = c.parent_class;
    net.heads.push_back(std::move(hd));
  }
  return net;
}

Network build_flat_network(int num_classes, const NetworkConfig& cfg, uint64_t seed) {
  Network net = build_trunk(cfg, seed);
  net.flat = true;
  Builder b{&net.params, &net.buffers, Rng(mix_seed(seed, 0x11b3u))};
  net.heads.push_back(b.head("flat", num_classes, cfg, -1));
  return net;
}

ClassifierHead build_flat_head(int num_classes, const NetworkConfig& cfg, Rng& rng) {
  ParamRegistry scratch;
  std::vector<std::pair<std::string, Tensor>> scratch_buffers;
  Builder b{&scratch, &scratch_buffers, Rng(rng.next_u64())};
  return b.head("flat", num_classes, cfg, -1);
}

int64_t head_adapt_param_count(const NetworkConfig& cfg, int bottleneck_width) {
  return static_cast<int64_t>(cfg.rep_depth) * bottleneck_width * 3 * 3;
}

Tensor Network::forward_shared(const Tensor& images, Mode mode) {
  if (images.shape().size() != 4 || images.dim(1) != 3) {
    throw Error("forward_shared expects (N,3,H,W) input, got " + shape_str(images.shape()));
  }
  if (images.dim(2) % cfg.output_stride != 0 || images.dim(3) % cfg.output_stride != 0) {
    throw Error(strprintf(
        "input extents %dx%d are not divisible by the output stride %d; pad the input to a "
        "multiple of %d",
        images.dim(2), images.dim(3), cfg.output_stride, cfg.output_stride));
  }
  ++shared_forward_count;
  Tensor x = stem_bn(stem(images), mode, true);
  for (auto& blk : blocks) x = blk.forward(x, mode);
  return rep_bn(rep_conv(x), mode, true);
}

Tensor Network::forward_head(ClassifierHead& head, const Tensor& rep, int out_h, int out_w,
                             Mode mode) {
  Tensor x = head.adapt_bn(head.adapt(rep), mode, true);
  x = add_channel_bias(head.project(x), head.project_bias);
  x = conv2d_transpose(x, head.up_kernel, 2);
  x = bilinear_upsample(x, out_h, out_w);
  return softmax_map(x);
}

std::vector<Tensor> Network::forward_all(const Tensor& images, int out_h, int out_w, Mode mode) {
  Tensor rep = forward_shared(images, mode);
  std::vector<Tensor> sigmas;
  sigmas.reserve(heads.size());
  for (auto& head : heads) sigmas.push_back(forward_head(head, rep, out_h, out_w, mode));
  return sigmas;
}

std::vector<NamedArray> Network::state_arrays() const {
  std::vector<NamedArray> arrays;
  for (const auto& e : params.entries) {
    arrays.push_back({"param." + e.name, e.tensor.shape(), e.tensor.values()});
  }
  for (const auto& [name, t] : buffers) {
    arrays.push_back({"buffer." + name, t.shape(), t.values()});
  }
  return arrays;
}

void Network::load_state(const std::vector<NamedArray>& arrays) {
  auto restore = [&](const std::string& key, Tensor& t) {
    const NamedArray* a = find_array(arrays, key);
    if (!a) throw Error("checkpoint is missing array '" + key + "'");
    if (a->shape != t.shape()) {
      throw Error(strprintf("checkpoint array '%s' has shape %s, expected %s", key.c_str(),
                            shape_str(a->shape).c_str(), shape_str(t.shape()).c_str()));
    }
    t.values() = a->data;
  };
  for (auto& e : params.entries) restore("param." + e.name, e.tensor);
  for (auto& [name, t] : buffers) restore("buffer." + name, t);
}

std::string Network::describe() const {
  std::ostringstream out;
  out << (flat ? "flat" : "hierarchical") << " network\n";
  out << "  output stride: " << cfg.output_stride << "\n";
  out << "  representation depth: " << cfg.rep_depth << "\n";
  out << "  extractor blocks: " << blocks.size() << " over widths";
  for (int w : cfg.widths) out << " " << w;
  out << "\n  branches: " << heads.size() << "\n";
  for (const auto& hd : heads) {
    int64_t branch_params = 0;
    std::string prefix = hd.classifier_id < 0 ? "flat" : strprintf("head%d", hd.classifier_id);
    for (const auto& e : params.entries) {
      if (e.name.rfind(prefix + ".", 0) == 0) branch_params += e.tensor.numel();
    }
    out << "    " << prefix << ": " << hd.num_classes << " classes, " << branch_params
        << " parameters";
    if (hd.parent_classifier >= 0) {
      out << ", parent classifier " << hd.parent_classifier << " class " << hd.parent_class;
    }
    out << "\n";
  }
  out << "  total parameters: " << parameter_count() << "\n";
  return out.str();
}

void save_network_checkpoint(const std::string& path, const Network& net, const SgdOptimizer* opt,
                             int64_t step) {
  std::vector<NamedArray> arrays = net.state_arrays();
  arrays.push_back({"meta.step", {1}, {static_cast<real_t>(step)}});
  if (opt) {
    arrays.push_back({"optim.lr", {1}, {opt->learning_rate}});
    arrays.push_back({"optim.momentum", {1}, {opt->momentum}});
    arrays.push_back({"optim.weight_decay", {1}, {opt->weight_decay}});
    for (size_t i = 0; i < opt->velocity.size(); ++i) {
      arrays.push_back({"optim.velocity." + net.params.entries[i].name,
                        net.params.entries[i].tensor.shape(), opt->velocity[i]});
    }
  }
  save_checkpoint(path, arrays);
}

int64_t load_network_checkpoint(const std::string& path, Network& net, SgdOptimizer* opt) {
  auto arrays = load_checkpoint(path);
  net.load_state(arrays);
  if (opt) {
    if (const NamedArray* a = find_array(arrays, "optim.lr")) opt->learning_rate = a->data[0];
    if (const NamedArray* a = find_array(arrays, "optim.momentum")) opt->momentum = a->data[0];
    if (const NamedArray* a = find_array(arrays, "optim.weight_decay"))
      opt->weight_decay = a->data[0];
    opt->velocity.clear();
    for (const auto& e : net.params.entries) {
      const NamedArray* a = find_array(arrays, "optim.velocity." + e.name);
      if (!a) {
        opt->velocity.clear();
        break;
      }
      opt->velocity.push_back(a->data);
    }
  }
  const NamedArray* step = find_array(arrays, "meta.step");
  return step ? static_cast<int64_t>(step->data[0]) : 0;
}

}  // namespace hseg

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "hseg/evaluation.hpp"
#include "hseg/training.hpp"
#include "hseg/util.hpp"
#include "testutil.hpp"

using namespace hseg;
using hseg::test::random_tensor;

namespace {

LabelHierarchy sign_hierarchy() {
  return parse_hierarchy(R"(root
  sky
  grass
  road
  sign
    sub_a
    sub_b
    sub_c
)");
}

// dense scenes labeled coarsely; boxes labeled with subclasses
RoutingTable bind_two_datasets(LabelHierarchy& h) {
  bind_dataset(h, "scenes", {{0, "sky"}, {1, "grass"}, {2, "road"}, {3, "sign"}});
  bind_dataset(h, "signs", {{0, "sub_a"}, {1, "sub_b"}, {2, "sub_c"}});
  return RoutingTable(h, {"scenes", "signs"});
}

Sample dense_sample(int h, int w, const std::vector<uint8_t>& labels, int dataset) {
  Sample s;
  s.h = h;
  s.w = w;
  s.image = Tensor::zeros({3, h, w});
  s.dense = labels;
  s.dataset = dataset;
  return s;
}

std::vector<std::vector<int>> uniform_decisions(const LabelHierarchy& h, int64_t pixels,
                                                int value) {
  std::vector<std::vector<int>> out;
  for (size_t j = 0; j < h.classifiers.size(); ++j) {
    out.emplace_back(static_cast<size_t>(pixels), value);
  }
  return out;
}

}  // namespace

TEST_CASE("root classifier sees every non-ignore dense pixel in p1 only") {
  LabelHierarchy h = sign_hierarchy();
  RoutingTable table = bind_two_datasets(h);
  std::vector<uint8_t> labels(16, 0);
  labels[3] = 255;  // one ignore pixel
  labels[7] = 2;
  Sample s = dense_sample(4, 4, labels, 0);
  auto decisions = uniform_decisions(h, 16, 0);
  SupervisionSets sets = route_supervision(table, {&s, 1}, {}, decisions);
  CHECK(sets.p1[0].size() == 15);
  CHECK(sets.p2[0].empty());
  for (const auto& t : sets.p1[0]) CHECK(t.pixel != 3);
}

TEST_CASE("box pixels reach a classifier only when the parent decides its class") {
  LabelHierarchy h = sign_hierarchy();
  RoutingTable table = bind_two_datasets(h);
  const int sign_cls = h.nodes[static_cast<size_t>(h.find("sign"))].classifier;
  const int sign_slot = h.nodes[static_cast<size_t>(h.find("sign"))].child_slot;

  Sample s;
  s.h = 4;
  s.w = 4;
  s.image = Tensor::zeros({3, 4, 4});
  s.dataset = 1;  // the box dataset
  s.boxes.push_back({1, 0, 0, 2, 2, ShapeKind::Rectangle});  // sub_b box over pixels 0,1,4,5
  PseudoMask mask = bbox_to_pseudo_mask(s.boxes, 4, 4);

  // root decides "sign" only at pixels 0 and 5
  auto decisions = uniform_decisions(h, 16, 0);
  decisions[0][0] = sign_slot;
  decisions[0][5] = sign_slot;
  SupervisionSets sets = route_supervision(table, {&s, 1}, {&mask, 1}, decisions);

  // root-level pseudo supervision is ungated: all four box pixels
  REQUIRE(sets.p2[0].size() == 4);
  for (const auto& t : sets.p2[0]) CHECK(t.target == sign_slot);
  // the sign classifier only receives the pixels routed into "sign"
  std::set<int32_t> got;
  for (const auto& t : sets.p2[static_cast<size_t>(sign_cls)]) {
    got.insert(t.pixel);
    CHECK(t.target == 1);  // sub_b
  }
  CHECK(got == std::set<int32_t>{0, 5});
  CHECK(sets.p1[static_cast<size_t>(sign_cls)].empty());
}

TEST_CASE("hand-built 4x4 scene matches a manual enumeration") {
  LabelHierarchy h = sign_hierarchy();
  RoutingTable table = bind_two_datasets(h);
  const int sign_cls = h.nodes[static_cast<size_t>(h.find("sign"))].classifier;
  const int sign_slot = h.nodes[static_cast<size_t>(h.find("sign"))].child_slot;

  // mixed sample from the scenes dataset: rows of sky/grass, one ignore
  // pixel, plus a sub-labeled box from the signs dataset in a second sample
  std::vector<uint8_t> labels = {0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 255, 3};
  Sample scene = dense_sample(4, 4, labels, 0);
  Sample boxed;
  boxed.h = 4;
  boxed.w = 4;
  boxed.image = Tensor::zeros({3, 4, 4});
  boxed.dataset = 1;
  boxed.boxes.push_back({2, 1, 1, 3, 3, ShapeKind::Rectangle});  // sub_c at pixels 5,6,9,10
  std::vector<Sample> batch = {scene, boxed};
  std::vector<PseudoMask> masks = {PseudoMask{}, bbox_to_pseudo_mask(boxed.boxes, 4, 4)};

  auto decisions = uniform_decisions(h, 32, 0);
  // second sample: root decides "sign" at pixels 5 and 9 (batch pixels 21, 25)
  decisions[0][16 + 5] = sign_slot;
  decisions[0][16 + 9] = sign_slot;

  SupervisionSets sets = route_supervision(table, batch, masks, decisions);

  // p1 at the root: 15 scene pixels (one ignore), targets follow the rows
  REQUIRE(sets.p1[0].size() == 15);
  for (const auto& t : sets.p1[0]) {
    int expect = labels[static_cast<size_t>(t.pixel)] == 3 ? sign_slot
                                                           : labels[static_cast<size_t>(t.pixel)];
    CHECK(t.target == expect);
  }
  // the sign classifier receives no p1 (coarse binding stops above it)
  CHECK(sets.p1[static_cast<size_t>(sign_cls)].empty());
  // p2 at the root: the four box pixels, ungated
  std::set<int32_t> root_p2;
  for (const auto& t : sets.p2[0]) root_p2.insert(t.pixel);
  CHECK(root_p2 == std::set<int32_t>{21, 22, 25, 26});
  // p2 at the sign classifier: exactly the intersection with the decisions
  std::set<int32_t> sign_p2;
  for (const auto& t : sets.p2[static_cast<size_t>(sign_cls)]) {
    sign_p2.insert(t.pixel);
    CHECK(t.target == 2);
  }
  CHECK(sign_p2 == std::set<int32_t>{21, 25});
}

TEST_CASE("p1 and p2 stay disjoint on random mixed batches") {
  LabelHierarchy h = sign_hierarchy();
  RoutingTable table = bind_two_datasets(h);
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    Sample s;
    s.h = 6;
    s.w = 6;
    s.image = Tensor::zeros({3, 6, 6});
    s.dataset = 0;
    std::vector<uint8_t> labels(36);
    for (auto& l : labels) {
      l = rng.uniform() < 0.2 ? 255 : static_cast<uint8_t>(rng.uniform_int(0, 3));
    }
    s.dense = labels;
    // scenes dataset has no boxes bound, use the signs dataset for the boxed one
    Sample boxed;
    boxed.h = 6;
    boxed.w = 6;
    boxed.image = Tensor::zeros({3, 6, 6});
    boxed.dataset = 1;
    boxed.dense = std::vector<uint8_t>(36, 255);
    boxed.boxes.push_back({static_cast<int>(rng.uniform_int(0, 2)),
                           static_cast<int>(rng.uniform_int(0, 3)),
                           static_cast<int>(rng.uniform_int(0, 3)), 6, 6,
                           ShapeKind::Rectangle});
    std::vector<Sample> batch = {s, boxed};
    std::vector<PseudoMask> masks = {PseudoMask{}, bbox_to_pseudo_mask(boxed.boxes, 6, 6)};
    std::vector<std::vector<int>> decisions;
    for (size_t j = 0; j < h.classifiers.size(); ++j) {
      std::vector<int> d(72);
      for (auto& v : d) {
        v = static_cast<int>(
            rng.uniform_int(0, h.classifiers[j].num_classes - 1));
      }
      decisions.push_back(std::move(d));
    }
    SupervisionSets sets = route_supervision(table, batch, masks, decisions);
    for (size_t j = 0; j < h.classifiers.size(); ++j) {
      std::set<int32_t> p1;
      for (const auto& t : sets.p1[j]) p1.insert(t.pixel);
      for (const auto& t : sets.p2[j]) CHECK(p1.count(t.pixel) == 0);
    }
  }
}

TEST_CASE("supervision exclusion: a level-2 binding never reaches level-3 classifiers") {
  LabelHierarchy h = parse_hierarchy(R"(root
  sign
    front
      f1
      f2
    back
  region
)");
  bind_dataset(h, "coarse2", {{0, "front"}, {1, "region"}});
  RoutingTable table(h, {"coarse2"});
  const int front_cls = h.nodes[static_cast<size_t>(h.find("front"))].classifier;

  std::vector<uint8_t> labels(16, 0);
  Sample s = dense_sample(4, 4, labels, 0);
  auto decisions = uniform_decisions(h, 16, 0);
  SupervisionSets sets = route_supervision(table, {&s, 1}, {}, decisions);
  CHECK(!sets.p1[0].empty());
  CHECK(sets.p1[static_cast<size_t>(front_cls)].empty());
  CHECK(sets.p2[static_cast<size_t>(front_cls)].empty());
}

TEST_CASE("hierarchical loss values") {
  // single pixel, three classes
  Tensor perfect = Tensor::from({1, 3, 1, 1}, {1, 0, 0});
  CHECK(hierarchical_loss(perfect, {{0, 0}}, {}).item() == doctest::Approx(0.0).epsilon(1e-12));

  Tensor uniform = Tensor::full({1, 4, 1, 1}, real_t(0.25));
  CHECK(hierarchical_loss(uniform, {{0, 2}}, {}).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // 2 p1 pixels + 3 p2 pixels against the direct two-term average
  Rng rng(31);
  Tensor sigma = random_tensor({1, 3, 2, 4}, rng, 0.05, 1.0);
  std::vector<PixelTarget> p1 = {{0, 1}, {3, 2}};
  std::vector<PixelTarget> p2 = {{1, 0}, {5, 2}, {7, 1}};
  auto prob = [&](const PixelTarget& t) {
    return static_cast<double>(sigma.values()[static_cast<size_t>(t.target * 8 + t.pixel)]);
  };
  double expect = 0;
  for (const auto& t : p1) expect -= std::log(prob(t)) / 2;
  for (const auto& t : p2) expect -= std::log(prob(t)) / 3;
  CHECK(hierarchical_loss(sigma, p1, p2).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("empty pixel sets contribute exactly zero") {
  Rng rng(37);
  Tensor sigma = random_tensor({1, 3, 2, 2}, rng, 0.05, 1.0);
  std::vector<PixelTarget> p1 = {{0, 0}, {1, 1}};
  std::vector<PixelTarget> p2 = {{2, 2}, {3, 0}};
  double with_p2 = hierarchical_loss(sigma, p1, p2).item();
  double without_p2 = hierarchical_loss(sigma, p1, {}).item();
  double p2_term = nll_mean(sigma, p2).item();
  CHECK(with_p2 - without_p2 == doctest::Approx(p2_term).epsilon(1e-12));
  CHECK(hierarchical_loss(sigma, {}, {}).item() == 0.0);
}

TEST_CASE("loss is nonnegative and zero only at certain targets") {
  Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor sigma = random_tensor({1, 3, 2, 2}, rng, 0.01, 1.0);
    std::vector<PixelTarget> p1 = {{0, 1}, {2, 0}};
    double v = hierarchical_loss(sigma, p1, {}).item();
    CHECK(v >= 0.0);
  }
  Tensor certain = Tensor::from({1, 2, 1, 2}, {1, 0, 0, 1});
  CHECK(hierarchical_loss(certain, {{0, 0}, {1, 1}}, {}).item() == 0.0);
}

TEST_CASE("total loss weighting and regularizer") {
  LabelHierarchy h = parse_hierarchy(R"(root
  a
    a1
      x1
      x2
    a2
  b
)");
  REQUIRE(h.classifiers.size() == 3);  // levels 1, 2, 3
  ParamRegistry params;  // empty: no regularizer contribution
  LossWeights w;
  std::vector<Tensor> losses = {Tensor::scalar(2), Tensor::scalar(1), Tensor::scalar(1)};
  CHECK(total_loss(losses, h, w, params).item() == doctest::Approx(2.2).epsilon(1e-12));

  // all-zero lambdas leave only the regularizer
  ParamRegistry reg;
  Tensor p = Tensor::from({3}, {1, 2, 3}, true);
  reg.add("w", p);
  Tensor g = Tensor::from({2}, {5, 5}, true);
  reg.add("bn.gamma", g, /*no_decay=*/true);
  LossWeights zero;
  zero.level_lambda = {0, 0, 0};
  zero.decay = real_t(0.1);
  double expect_reg = 0.1 * (1 + 4 + 9);  // no_decay parameters are excluded
  CHECK(total_loss(losses, h, zero, reg).item() == doctest::Approx(expect_reg).epsilon(1e-12));
  CHECK(weight_decay_value(reg, real_t(0.1)) == doctest::Approx(expect_reg).epsilon(1e-12));
}

TEST_CASE("flat loss values") {
  Tensor perfect = Tensor::from({1, 2, 1, 2}, {1, 0, 0, 1});
  CHECK(flat_loss(perfect, {0, 1}).item() == doctest::Approx(0.0).epsilon(1e-12));

  Tensor uniform = Tensor::full({1, 9, 1, 1}, real_t(1.0 / 9));
  CHECK(flat_loss(uniform, {4}).item() == doctest::Approx(std::log(9.0)).epsilon(1e-12));

  Rng rng(43);
  Tensor sigma = random_tensor({2, 4, 2, 2}, rng, 0.05, 1.0);
  std::vector<int> targets = {0, -1, 2, 3, 1, 1, -1, 0};
  double expect = 0;
  int counted = 0;
  for (int64_t p = 0; p < 8; ++p) {
    int t = targets[static_cast<size_t>(p)];
    if (t < 0) continue;
    int64_t n = p / 4, k = p % 4;
    expect -= std::log(
        static_cast<double>(sigma.values()[static_cast<size_t>((n * 4 + t) * 4 + k)]));
    ++counted;
  }
  expect /= counted;
  CHECK(flat_loss(sigma, targets).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("degenerate one-level hierarchy reproduces flat cross entropy") {
  LabelHierarchy h = parse_hierarchy("root\n  a\n  b\n  c\n");
  bind_dataset(h, "ds", {{0, "a"}, {1, "b"}, {2, "c"}});
  RoutingTable table(h, {"ds"});
  FlatSpace space = flatten_union(h);
  Rng rng(47);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor sigma = random_tensor({1, 3, 4, 4}, rng, 0.01, 1.0);
    std::vector<uint8_t> labels(16);
    for (auto& l : labels) {
      l = rng.uniform() < 0.2 ? 255 : static_cast<uint8_t>(rng.uniform_int(0, 2));
    }
    Sample s = dense_sample(4, 4, labels, 0);
    auto decisions = uniform_decisions(h, 16, 0);
    SupervisionSets sets = route_supervision(table, {&s, 1}, {}, decisions);
    Tensor hier = hierarchical_loss(sigma, sets.p1[0], sets.p2[0]);
    LossWeights w;
    w.level_lambda = {1.0};
    w.decay = 0;
    ParamRegistry empty;
    Tensor total = total_loss({hier}, h, w, empty);
    std::vector<int> targets = flat_targets(table, {&s, 1}, {}, space);
    Tensor flat = flat_loss(sigma, targets);
    CHECK(std::abs(total.item() - flat.item()) < 1e-12);
  }
}

TEST_CASE("no gradient flows through the routing decisions") {
  LabelHierarchy h = sign_hierarchy();
  bind_dataset(h, "scenes", {{0, "sky"}, {1, "grass"}, {2, "road"}, {3, "sign"}});
  bind_dataset(h, "signs", {{0, "sub_a"}, {1, "sub_b"}, {2, "sub_c"}});
  RoutingTable table(h, {"scenes", "signs"});
  NetworkConfig cfg;
  cfg.extractor_blocks = 3;
  cfg.widths = {4, 6, 8};
  cfg.rep_depth = 8;
  cfg.bottleneck_width = 4;
  Network net = build_network(h, cfg, 51);
  const int sign_cls = h.nodes[static_cast<size_t>(h.find("sign"))].classifier;

  Sample boxed;
  boxed.h = 16;
  boxed.w = 16;
  Rng rng(53);
  boxed.image = random_tensor({3, 16, 16}, rng, 0.0, 1.0);
  boxed.dataset = 1;
  boxed.boxes.push_back({0, 2, 2, 10, 10, ShapeKind::Rectangle});
  std::vector<Sample> batch = {boxed};
  std::vector<PseudoMask> masks = {bbox_to_pseudo_mask(boxed.boxes, 16, 16)};

  Tensor images = Tensor::zeros({1, 3, 16, 16});
  images.values() = boxed.image.values();
  Tensor rep = net.forward_shared(images, Mode::Train);
  std::vector<Tensor> sigmas;
  for (auto& head : net.heads) {
    sigmas.push_back(net.forward_head(head, rep, 16, 16, Mode::Train));
  }
  std::vector<std::vector<int>> decisions;
  for (const auto& s : sigmas) decisions.push_back(channel_argmax(s));
  // pin the parent decisions so the pseudo set is non-empty regardless of
  // the random initialization
  const int sign_slot = h.nodes[static_cast<size_t>(h.find("sign"))].child_slot;
  std::fill(decisions[0].begin(), decisions[0].end(), sign_slot);
  SupervisionSets sets = route_supervision(table, batch, masks, decisions);
  REQUIRE(!sets.p2[static_cast<size_t>(sign_cls)].empty());

  // backpropagate only the sign classifier's pseudo term
  Tensor loss = nll_mean(sigmas[static_cast<size_t>(sign_cls)],
                         sets.p2[static_cast<size_t>(sign_cls)]);
  backward(loss);
  // the root head's own branch parameters receive nothing: decisions are
  // plain integers, not graph nodes
  CHECK(!net.heads[0].adapt.w.has_grad());
  CHECK(!net.heads[0].project.w.has_grad());
  // while the shared trunk does receive gradient through the sign branch
  CHECK(net.params.find("stem.w")->has_grad());

  // perturbing the root scores without flipping any argmax changes neither
  // the pseudo membership nor the sign-branch loss
  auto argmax_decisions = decisions;
  argmax_decisions[0] = channel_argmax(sigmas[0]);
  SupervisionSets sets_a = route_supervision(table, batch, masks, argmax_decisions);
  double before = nll_mean(sigmas[static_cast<size_t>(sign_cls)],
                           sets_a.p2[static_cast<size_t>(sign_cls)]).item();
  for (auto& v : sigmas[0].values()) v *= real_t(1.0000001);
  auto perturbed = argmax_decisions;
  perturbed[0] = channel_argmax(sigmas[0]);
  CHECK(perturbed[0] == argmax_decisions[0]);  // ordering preserved
  SupervisionSets sets_b = route_supervision(table, batch, masks, perturbed);
  CHECK(sets_b.p2[static_cast<size_t>(sign_cls)].size() ==
        sets_a.p2[static_cast<size_t>(sign_cls)].size());
  double after = nll_mean(sigmas[static_cast<size_t>(sign_cls)],
                          sets_b.p2[static_cast<size_t>(sign_cls)]).item();
  CHECK(after == before);
}

namespace {

// a linearly separable two-class corpus in a temp directory
std::vector<LoadedDataset> separable_corpus(LabelHierarchy& h, const std::string& dir) {
  DatasetSpec spec;
  spec.name = "twoclass";
  spec.annotation = AnnotationType::Dense;
  spec.train_images = 12;
  spec.val_images = 4;
  spec.size_min = 32;
  spec.size_max = 40;
  spec.labels = {{0, "light", 0.5, false, ShapeKind::Rectangle},
                 {1, "dark", 0.5, false, ShapeKind::Rectangle}};
  bind_dataset(h, "twoclass", {{0, "light"}, {1, "dark"}});
  write_corpus(dir, spec, h, 61);
  std::vector<LoadedDataset> datasets;
  datasets.push_back(load_corpus(dir));
  return datasets;
}

NetworkConfig tiny_net_config() {
  NetworkConfig cfg;
  cfg.extractor_blocks = 3;
  cfg.widths = {4, 6, 8};
  cfg.rep_depth = 8;
  cfg.bottleneck_width = 4;
  return cfg;
}

}  // namespace

TEST_CASE("training a one-classifier network separates two classes") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "hseg_train_sanity";
  fs::remove_all(dir);
  LabelHierarchy h = parse_hierarchy("root\n  light\n  dark\n");
  auto datasets = separable_corpus(h, dir.string() + "/twoclass");

  double mpa_sum = 0;
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    Network net = build_network(h, tiny_net_config(), seed);
    TrainConfig cfg;
    cfg.steps = 200;
    cfg.lr = 0.05;
    cfg.ratios = {4};
    cfg.crop_h = 32;
    cfg.crop_w = 32;
    cfg.eval_every = 200;  // single final evaluation
    cfg.seed = seed;
    TrainResult r = train(net, h, datasets, cfg,
                          (dir / strprintf("run%llu", (unsigned long long)seed)).string());
    mpa_sum += r.final_metrics.at("level1.mpa");
  }
  CHECK(mpa_sum / 3 > 0.95);
  fs::remove_all(dir);
}

TEST_CASE("learning rate is halved at three evenly spaced milestones") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "hseg_train_lr";
  fs::remove_all(dir);
  LabelHierarchy h = parse_hierarchy("root\n  light\n  dark\n");
  auto datasets = separable_corpus(h, dir.string() + "/twoclass");
  Network net = build_network(h, tiny_net_config(), 1);
  TrainConfig cfg;
  cfg.steps = 40;
  cfg.crop_h = 24;
  cfg.crop_w = 24;
  cfg.eval_every = 40;
  cfg.seed = 1;
  TrainResult r = train(net, h, datasets, cfg, (dir / "run").string());

  std::string log = read_text_file(r.metrics_log_path);
  std::vector<std::string> lr_lines;
  std::istringstream in(log);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find(", train, lr, ") != std::string::npos) lr_lines.push_back(line);
  }
  REQUIRE(lr_lines.size() == 4);
  CHECK(lr_lines[0] == "0, train, lr, 0.01");
  CHECK(lr_lines[1] == "10, train, lr, 0.005");
  CHECK(lr_lines[2] == "20, train, lr, 0.0025");
  CHECK(lr_lines[3] == "30, train, lr, 0.00125");
  fs::remove_all(dir);
}

TEST_CASE("identical seeds reproduce identical metrics logs") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "hseg_train_determinism";
  fs::remove_all(dir);
  LabelHierarchy h = parse_hierarchy("root\n  light\n  dark\n");
  auto datasets = separable_corpus(h, dir.string() + "/twoclass");

  std::string logs[2];
  for (int run = 0; run < 2; ++run) {
    Network net = build_network(h, tiny_net_config(), 7);
    TrainConfig cfg;
    cfg.steps = 30;
    cfg.crop_h = 24;
    cfg.crop_w = 24;
    cfg.eval_every = 15;
    cfg.log_every = 5;
    cfg.seed = 7;
    TrainResult r = train(net, h, datasets, cfg, (dir / strprintf("run%d", run)).string());
    logs[run] = read_text_file(r.metrics_log_path);
  }
  CHECK(logs[0] == logs[1]);
  CHECK(!logs[0].empty());
  fs::remove_all(dir);
}

TEST_CASE("shadow-parameter EMA is off by default and usable when enabled") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "hseg_train_ema";
  fs::remove_all(dir);
  LabelHierarchy h = parse_hierarchy("root\n  light\n  dark\n");
  auto datasets = separable_corpus(h, dir.string() + "/twoclass");

  TrainConfig cfg;
  cfg.steps = 30;
  cfg.crop_h = 24;
  cfg.crop_w = 24;
  cfg.eval_every = 15;
  cfg.seed = 5;
  CHECK(cfg.weight_ema == 0.0);  // disabled unless requested

  Network net = build_network(h, tiny_net_config(), 5);
  TrainConfig ema_cfg = cfg;
  ema_cfg.weight_ema = 0.9;
  TrainResult r = train(net, h, datasets, ema_cfg, (dir / "ema").string());
  CHECK(r.final_metrics.count("level1.mpa") == 1);

  Network plain = build_network(h, tiny_net_config(), 5);
  TrainResult r2 = train(plain, h, datasets, cfg, (dir / "plain").string());
  // the shadow average evaluates differently from the raw parameters
  CHECK(r.final_metrics.at("level1.mpa") != r2.final_metrics.at("level1.mpa"));
  fs::remove_all(dir);
}

TEST_CASE("training aborts with a diagnostic when the loss diverges") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "hseg_train_nan";
  fs::remove_all(dir);
  LabelHierarchy h = parse_hierarchy("root\n  light\n  dark\n");
  auto datasets = separable_corpus(h, dir.string() + "/twoclass");
  Network net = build_network(h, tiny_net_config(), 1);
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.lr = 1e18;  // guaranteed blow-up
  cfg.crop_h = 24;
  cfg.crop_w = 24;
  cfg.eval_every = 30;
  cfg.seed = 1;
  CHECK_THROWS_WITH_AS(train(net, h, datasets, cfg, (dir / "run").string()),
                       doctest::Contains("diverged"), Error);
  fs::remove_all(dir);
}

TEST_CASE("training is blocked when validation fails") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "hseg_train_blocked";
  fs::remove_all(dir);
  LabelHierarchy h = sign_hierarchy();
  // bbox-only dataset bound at the root level: no per-pixel coverage
  DatasetSpec spec;
  spec.name = "boxes_only";
  spec.annotation = AnnotationType::Bbox;
  spec.train_images = 2;
  spec.val_images = 1;
  spec.size_min = 32;
  spec.size_max = 40;
  spec.labels = {{0, "sign", 0.02, true, ShapeKind::Circle}};
  bind_dataset(h, "boxes_only", {{0, "sign"}});
  write_corpus(dir.string() + "/boxes_only", spec, h, 3);
  std::vector<LoadedDataset> datasets;
  datasets.push_back(load_corpus(dir.string() + "/boxes_only"));

  Network net = build_network(h, tiny_net_config(), 1);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.crop_h = 24;
  cfg.crop_w = 24;
  CHECK_THROWS_WITH_AS(train(net, h, datasets, cfg, (dir / "run").string()),
                       doctest::Contains("validation failed"), Error);
  fs::remove_all(dir);
}

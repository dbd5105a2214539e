#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "hseg/hierarchy.hpp"
#include "hseg/synth_data.hpp"
#include "hseg/util.hpp"

using namespace hseg;

namespace {

LabelHierarchy two_level_hierarchy() {
  LabelHierarchy h = parse_hierarchy(R"(root
  sky
  grass
  road
  sign
    sub_a
    sub_b
    sub_c
)");
  return h;
}

DatasetSpec basic_spec() {
  DatasetSpec spec;
  spec.name = "demo";
  spec.annotation = AnnotationType::Dense;
  spec.train_images = 4;
  spec.val_images = 2;
  spec.size_min = 48;
  spec.size_max = 64;
  spec.labels = {
      {0, "sky", 0.3, false, ShapeKind::Rectangle},
      {1, "grass", 0.3, false, ShapeKind::Rectangle},
      {2, "road", 0.36, false, ShapeKind::Rectangle},
      {3, "sign", 0.01, true, ShapeKind::Circle},
  };
  return spec;
}

}  // namespace

TEST_CASE("generate_scene is deterministic per seed") {
  LabelHierarchy h = two_level_hierarchy();
  DatasetSpec spec = basic_spec();
  bind_dataset(h, spec.name, {{0, "sky"}, {1, "grass"}, {2, "road"}, {3, "sign"}});
  Sample a = generate_scene(99, spec, h);
  Sample b = generate_scene(99, spec, h);
  CHECK(a.h == b.h);
  CHECK(a.w == b.w);
  CHECK(a.image.values() == b.image.values());
  REQUIRE(a.dense.has_value());
  CHECK(*a.dense == *b.dense);
  Sample c = generate_scene(100, spec, h);
  CHECK((c.h != a.h || c.image.values() != a.image.values()));
}

TEST_CASE("object pixel share tracks the requested share") {
  LabelHierarchy h = two_level_hierarchy();
  DatasetSpec spec = basic_spec();
  bind_dataset(h, spec.name, {{0, "sky"}, {1, "grass"}, {2, "road"}, {3, "sign"}});
  int64_t object_px = 0, total_px = 0;
  for (int i = 0; i < 100; ++i) {
    Sample s = generate_scene(static_cast<uint64_t>(i), spec, h);
    REQUIRE(s.dense.has_value());
    for (uint8_t lab : *s.dense) {
      if (lab == 3) ++object_px;
    }
    total_px += static_cast<int64_t>(s.h) * s.w;
  }
  double realized = static_cast<double>(object_px) / static_cast<double>(total_px);
  CHECK(realized >= 0.005);
  CHECK(realized <= 0.02);
}

TEST_CASE("bbox spec yields boxes and no dense labels") {
  LabelHierarchy h = two_level_hierarchy();
  DatasetSpec spec = basic_spec();
  spec.annotation = AnnotationType::Bbox;
  spec.labels[3].share = 0.03;  // enough to guarantee at least one box
  bind_dataset(h, spec.name, {{0, "sky"}, {1, "grass"}, {2, "road"}, {3, "sign"}});
  Sample s = generate_scene(5, spec, h);
  CHECK(!s.dense.has_value());
  CHECK(!s.boxes.empty());
  for (const auto& b : s.boxes) {
    CHECK(b.x0 >= 0);
    CHECK(b.y0 >= 0);
    CHECK(b.x1 <= s.w);
    CHECK(b.y1 <= s.h);
  }
}

TEST_CASE("coarse object bindings render subclass leaves") {
  LabelHierarchy h = two_level_hierarchy();
  DatasetSpec spec = basic_spec();
  // the object label binds the inner "sign" node
  bind_dataset(h, spec.name, {{0, "sky"}, {1, "grass"}, {2, "road"}, {3, "sign"}});
  Sample s = generate_scene(7, spec, h);
  REQUIRE(s.dense.has_value());
  // annotation stays at the coarse label id
  std::set<int> labels(s.dense->begin(), s.dense->end());
  for (int lab : labels) CHECK(lab <= 3);
}

TEST_CASE("unsatisfiable frequency profile is rejected") {
  LabelHierarchy h = two_level_hierarchy();
  DatasetSpec spec = basic_spec();
  spec.labels[0].share = 0.9;
  spec.labels[1].share = 0.4;
  bind_dataset(h, spec.name, {{0, "sky"}, {1, "grass"}, {2, "road"}, {3, "sign"}});
  CHECK_THROWS_WITH_AS(generate_scene(1, spec, h), doctest::Contains("unsatisfiable"), Error);
}

TEST_CASE("pseudo mask: circle covers about pi/4 of its box") {
  Box box{1, 0, 0, 10, 10, ShapeKind::Circle};
  PseudoMask mask = bbox_to_pseudo_mask({box}, 12, 12);
  int count = 0;
  for (int16_t v : mask.label) {
    if (v == 1) ++count;
  }
  double expect = M_PI / 4 * 100;
  CHECK(count >= static_cast<int>(expect * 0.9));
  CHECK(count <= static_cast<int>(expect * 1.1));
}

TEST_CASE("pseudo mask: rectangle fills the box exactly") {
  Box box{2, 3, 4, 7, 9, ShapeKind::Rectangle};
  PseudoMask mask = bbox_to_pseudo_mask({box}, 12, 12);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) {
      bool inside = x >= 3 && x < 7 && y >= 4 && y < 9;
      CHECK(mask.at(y, x) == (inside ? 2 : -1));
    }
}

TEST_CASE("pseudo mask: no boxes, empty mask; zero-area box skipped") {
  PseudoMask empty = bbox_to_pseudo_mask({}, 4, 4);
  for (int16_t v : empty.label) CHECK(v == -1);

  std::vector<std::string> warnings;
  Box degenerate{1, 2, 2, 2, 5, ShapeKind::Rectangle};
  PseudoMask mask = bbox_to_pseudo_mask({degenerate}, 8, 8, &warnings);
  for (int16_t v : mask.label) CHECK(v == -1);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("degenerate") != std::string::npos);
}

TEST_CASE("pseudo mask: later boxes win and pixels stay inside boxes") {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Box> boxes;
    int n = static_cast<int>(rng.uniform_int(1, 4));
    for (int i = 0; i < n; ++i) {
      Box b;
      b.label = i;
      b.x0 = static_cast<int>(rng.uniform_int(0, 10));
      b.y0 = static_cast<int>(rng.uniform_int(0, 10));
      b.x1 = b.x0 + static_cast<int>(rng.uniform_int(1, 6));
      b.y1 = b.y0 + static_cast<int>(rng.uniform_int(1, 6));
      b.shape = static_cast<ShapeKind>(rng.uniform_int(0, 3));
      boxes.push_back(b);
    }
    PseudoMask mask = bbox_to_pseudo_mask(boxes, 16, 16);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        int16_t lab = mask.at(y, x);
        if (lab < 0) continue;
        // the owning box must contain the pixel; no later box may cover it
        bool inside_owner = false;
        for (size_t bi = 0; bi < boxes.size(); ++bi) {
          const Box& b = boxes[bi];
          bool in_box = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
          if (b.label == lab && in_box) inside_owner = true;
        }
        CHECK(inside_owner);
      }
  }
}

TEST_CASE("separate_instances joins diagonal pixels (8-connectivity)") {
  // pixels (0,0) and (1,1) touch only diagonally
  std::vector<uint8_t> mask = {1, 0, 0, 0, 1, 0, 0, 0, 0};
  auto comps = separate_instances(mask, 3, 3);
  REQUIRE(comps.size() == 1);
  CHECK(comps[0] == std::vector<int32_t>{0, 4});
}

TEST_CASE("separate_instances splits blobs separated by background") {
  // two rows of foreground with a blank row in between
  std::vector<uint8_t> mask(12, 0);
  for (int x = 0; x < 4; ++x) mask[static_cast<size_t>(x)] = 1;          // row 0
  for (int x = 0; x < 4; ++x) mask[static_cast<size_t>(8 + x)] = 1;      // row 2
  auto comps = separate_instances(mask, 3, 4);
  CHECK(comps.size() == 2);
}

namespace {

// independent flood fill used as the oracle
int flood_fill_count(const std::vector<uint8_t>& mask, int h, int w) {
  std::vector<uint8_t> seen(mask.size(), 0);
  int count = 0;
  for (size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || seen[start]) continue;
    ++count;
    std::vector<size_t> stack{start};
    seen[start] = 1;
    while (!stack.empty()) {
      size_t p = stack.back();
      stack.pop_back();
      int y = static_cast<int>(p) / w, x = static_cast<int>(p) % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
          size_t np = static_cast<size_t>(ny) * w + nx;
          if (mask[np] && !seen[np]) {
            seen[np] = 1;
            stack.push_back(np);
          }
        }
    }
  }
  return count;
}

}  // namespace

TEST_CASE("separate_instances matches a flood-fill oracle on random masks") {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    int h = static_cast<int>(rng.uniform_int(4, 16));
    int w = static_cast<int>(rng.uniform_int(4, 16));
    std::vector<uint8_t> mask(static_cast<size_t>(h) * w);
    double density = rng.uniform(0.2, 0.6);
    for (auto& v : mask) v = rng.uniform() < density ? 1 : 0;
    auto comps = separate_instances(mask, h, w);
    CHECK(static_cast<int>(comps.size()) == flood_fill_count(mask, h, w));
    // partition: each foreground pixel in exactly one component
    std::vector<int> owner(mask.size(), -1);
    for (size_t c = 0; c < comps.size(); ++c) {
      for (int32_t p : comps[c]) {
        CHECK(owner[static_cast<size_t>(p)] == -1);
        owner[static_cast<size_t>(p)] = static_cast<int>(c);
      }
    }
    for (size_t p = 0; p < mask.size(); ++p) {
      CHECK((mask[p] != 0) == (owner[p] != -1));
    }
  }
}

TEST_CASE("batch composition follows the 1:2:1 ratio") {
  std::vector<int> sizes = {6, 10, 4};
  std::vector<int> ratios = {1, 2, 1};
  BatchSampler sampler(sizes, ratios, 11);
  for (int step = 0; step < 20; ++step) {
    auto batch = sampler.batch(step);
    REQUIRE(batch.size() == 4);
    CHECK(batch[0].first == 0);
    CHECK(batch[1].first == 1);
    CHECK(batch[2].first == 1);
    CHECK(batch[3].first == 2);
  }
}

TEST_CASE("single dataset ratio 1 is plain sequential batching over a permutation") {
  BatchSampler sampler({5}, {1}, 3);
  std::set<int> seen;
  for (int step = 0; step < 5; ++step) {
    auto batch = sampler.batch(step);
    REQUIRE(batch.size() == 1);
    seen.insert(batch[0].second);
  }
  CHECK(seen.size() == 5);  // one epoch covers every sample exactly once
}

TEST_CASE("epochs reshuffle deterministically per seed") {
  auto epoch_order = [](int epoch, uint64_t seed) {
    std::vector<int> order;
    for (int step = 0; step < 3; ++step) {
      auto batch = sample_batch({3}, {1}, epoch * 3 + step, seed);
      order.push_back(batch[0].second);
    }
    return order;
  };
  auto e0 = epoch_order(0, 17);
  auto e1 = epoch_order(1, 17);
  CHECK(std::set<int>(e0.begin(), e0.end()).size() == 3);
  CHECK(std::set<int>(e1.begin(), e1.end()).size() == 3);
  // replay is identical
  CHECK(e0 == epoch_order(0, 17));
  CHECK(e1 == epoch_order(1, 17));
  // different seed gives a different overall order (with overwhelming odds)
  CHECK((e0 != epoch_order(0, 18) || e1 != epoch_order(1, 18)));
}

TEST_CASE("sample_batch rejects empty datasets and bad ratio lists") {
  CHECK_THROWS_AS(sample_batch({0}, {1}, 0, 1), Error);
  CHECK_THROWS_AS(sample_batch({3, 3}, {1}, 0, 1), Error);
}

TEST_CASE("downscale_and_crop on a square source") {
  LabelHierarchy h = two_level_hierarchy();
  DatasetSpec spec = basic_spec();
  bind_dataset(h, spec.name, {{0, "sky"}, {1, "grass"}, {2, "road"}, {3, "sign"}});
  Sample s = generate_scene(31, spec, h);
  Sample c = downscale_and_crop(s, 32, 32, 5);
  CHECK(c.h == 32);
  CHECK(c.w == 32);
  CHECK(c.image.shape() == Shape{3, 32, 32});
  REQUIRE(c.dense.has_value());
  CHECK(c.dense->size() == 32u * 32u);
  // nearest-neighbor label resampling introduces no new ids
  std::set<int> before(s.dense->begin(), s.dense->end());
  for (uint8_t lab : *c.dense) CHECK(before.count(lab) == 1);
}

TEST_CASE("downscale_and_crop drops boxes outside the crop and rejects upscaling") {
  Sample s;
  s.h = 40;
  s.w = 80;
  s.image = Tensor::zeros({3, 40, 80});
  s.boxes.push_back({0, 2, 2, 8, 8, ShapeKind::Rectangle});      // far left
  s.boxes.push_back({1, 70, 30, 78, 38, ShapeKind::Rectangle});  // far right
  s.boxes.push_back({2, 45, 10, 55, 30, ShapeKind::Rectangle});  // middle
  // scale 0.4 -> 16x32, center crop keeps x in [8, 24): only the middle box
  Sample c = downscale_and_crop(s, 16, 16, 1, /*center=*/true);
  REQUIRE(c.boxes.size() == 1);
  CHECK(c.boxes[0].label == 2);

  Sample tall;
  tall.h = 20;
  tall.w = 10;
  tall.image = Tensor::zeros({3, 20, 10});
  tall.dense = std::vector<uint8_t>(200, 0);
  CHECK_THROWS_AS(downscale_and_crop(tall, 16, 16, 1), Error);
}

TEST_CASE("corpus round trip preserves samples") {
  namespace fs = std::filesystem;
  LabelHierarchy h = two_level_hierarchy();
  DatasetSpec spec = basic_spec();
  spec.annotation = AnnotationType::Mixed;
  spec.labels[3].share = 0.03;
  bind_dataset(h, spec.name, {{0, "sky"}, {1, "grass"}, {2, "road"}, {3, "sign"}});
  fs::path dir = fs::temp_directory_path() / "hseg_corpus_test";
  fs::remove_all(dir);
  write_corpus(dir.string() + "/demo", spec, h, 77);
  LoadedDataset ds = load_corpus(dir.string() + "/demo");
  CHECK(ds.spec.name == "demo");
  CHECK(ds.train.size() == 4);
  CHECK(ds.val.size() == 2);
  Sample fresh = generate_scene(mix_seed(77, 0, 0), spec, h);
  REQUIRE(ds.train[0].dense.has_value());
  CHECK(*ds.train[0].dense == *fresh.dense);
  CHECK(ds.train[0].boxes.size() == fresh.boxes.size());
  // image round-trips through 8-bit quantization
  double max_diff = 0;
  for (size_t i = 0; i < fresh.image.values().size(); ++i) {
    max_diff = std::max(max_diff, std::abs(static_cast<double>(fresh.image.values()[i]) -
                                           ds.train[0].image.values()[i]));
  }
  CHECK(max_diff <= 0.5 / 255 + 1e-9);
  fs::remove_all(dir);
}

TEST_CASE("generated corpora exhibit the three heterogeneity archetypes") {
  namespace fs = std::filesystem;
  LabelHierarchy h = parse_hierarchy(R"(root
  sky
  grass
  road
  sign
    sub_a
    sub_b
    sub_c
    sub_d
    sub_e
    sub_f
)");
  // (a) coarse vs fine: one dataset labels "sign", the other its subclasses
  DatasetSpec coarse;
  coarse.name = "coarse";
  coarse.annotation = AnnotationType::Dense;
  coarse.train_images = 6;
  coarse.val_images = 2;
  coarse.size_min = 64;
  coarse.size_max = 96;
  coarse.labels = {
      {0, "sky", 0.40, false, ShapeKind::Rectangle},
      {1, "grass", 0.30, false, ShapeKind::Rectangle},
      {2, "road", 0.28, false, ShapeKind::Rectangle},
      {3, "sign", 0.004, true, ShapeKind::Circle},
  };
  bind_dataset(h, "coarse", {{0, "sky"}, {1, "grass"}, {2, "road"}, {3, "sign"}});
  DatasetSpec fine;
  fine.name = "fine";
  fine.annotation = AnnotationType::Bbox;  // (b) bbox-only dataset
  fine.train_images = 6;
  fine.val_images = 2;
  fine.size_min = 64;
  fine.size_max = 96;
  fine.labels = {
      {0, "sub_a", 0.0008, true, ShapeKind::Circle},
      {1, "sub_b", 0.0008, true, ShapeKind::Triangle},
      {2, "sub_c", 0.0008, true, ShapeKind::Hexagon},
      {3, "sub_d", 0.0008, true, ShapeKind::Circle},
      {4, "sub_e", 0.0008, true, ShapeKind::Triangle},
      {5, "sub_f", 0.0008, true, ShapeKind::Rectangle},
  };
  bind_dataset(h, "fine", {{0, "sub_a"}, {1, "sub_b"}, {2, "sub_c"}, {3, "sub_d"},
                           {4, "sub_e"}, {5, "sub_f"}});

  fs::path dir = fs::temp_directory_path() / "hseg_archetype_test";
  fs::remove_all(dir);
  write_corpus(dir.string() + "/coarse", coarse, h, 101);
  write_corpus(dir.string() + "/fine", fine, h, 102);
  std::vector<LoadedDataset> datasets;
  datasets.push_back(load_corpus(dir.string() + "/coarse"));
  datasets.push_back(load_corpus(dir.string() + "/fine"));

  // (a) the coarse dataset binds the inner node, the fine one its children
  int sign = h.find("sign");
  CHECK(h.node_of("coarse", 3) == sign);
  CHECK(h.is_ancestor(sign, h.node_of("fine", 0)));

  // (b) bbox-only: no dense labels in the fine train split
  for (const auto& s : datasets[1].train) {
    CHECK(!s.dense.has_value());
    CHECK(!s.boxes.empty());
  }

  // (c) pixel shares span at least two orders of magnitude
  auto counts = corpus_pixel_counts(h, datasets, "train");
  int64_t biggest = 0, smallest = INT64_MAX;
  for (const auto& n : h.nodes) {
    int64_t c = counts[static_cast<size_t>(n.index)];
    if (c == 0) continue;
    biggest = std::max(biggest, c);
    smallest = std::min(smallest, c);
  }
  CHECK(biggest >= 100 * smallest);
  fs::remove_all(dir);
}

TEST_CASE("dataset spec parse/serialize round trip") {
  DatasetSpec spec = load_dataset_spec(std::string(HSEG_CONFIG_DIR) + "/signset.spec");
  CHECK(spec.name == "signset");
  CHECK(spec.annotation == AnnotationType::Bbox);
  REQUIRE(spec.val_annotation.has_value());
  CHECK(*spec.val_annotation == AnnotationType::Dense);
  CHECK(spec.labels.size() == 43);
  DatasetSpec again = parse_dataset_spec(serialize_dataset_spec(spec));
  CHECK(again.labels.size() == spec.labels.size());
  CHECK(again.labels[14].shape == ShapeKind::Hexagon);
  CHECK(serialize_dataset_spec(again) == serialize_dataset_spec(spec));
}

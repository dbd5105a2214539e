#include <doctest.h>

#include <map>

#include "hseg/metrics.hpp"
#include "hseg/util.hpp"
#include "testutil.hpp"

using namespace hseg;
using hseg::test::random_tensor;

TEST_CASE("identical maps produce a diagonal matrix") {
  ConfusionAccumulator acc(3);
  std::vector<int> map = {0, 1, 2, 1, 0, 2, 2, 2};
  accumulate(acc, map, map, 255);
  for (int g = 0; g < 3; ++g)
    for (int p = 0; p < 3; ++p) {
      if (g != p) CHECK(acc.at(g, p) == 0);
    }
  CHECK(acc.at(0, 0) == 2);
  CHECK(acc.at(1, 1) == 2);
  CHECK(acc.at(2, 2) == 4);
}

TEST_CASE("ignore pixels leave the accumulator unchanged") {
  ConfusionAccumulator acc(2);
  std::vector<int> gt(10, 255);
  std::vector<int> pred(10, 1);
  accumulate(acc, gt, pred, 255);
  CHECK(acc.total() == 0);
}

TEST_CASE("labels outside the matrix are rejected") {
  ConfusionAccumulator acc(2);
  CHECK_THROWS_AS(acc.add(2, 0), Error);
  CHECK_THROWS_AS(acc.add(0, -1), Error);
}

TEST_CASE("random maps match a direct per-pixel tally") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int classes = static_cast<int>(rng.uniform_int(2, 6));
    std::vector<int> gt(64), pred(64);
    for (int i = 0; i < 64; ++i) {
      gt[static_cast<size_t>(i)] =
          rng.uniform() < 0.1 ? 255 : static_cast<int>(rng.uniform_int(0, classes - 1));
      pred[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_int(0, classes - 1));
    }
    ConfusionAccumulator acc(classes);
    accumulate(acc, gt, pred, 255);
    std::map<std::pair<int, int>, int64_t> tally;
    for (int i = 0; i < 64; ++i) {
      if (gt[static_cast<size_t>(i)] == 255) continue;
      ++tally[{gt[static_cast<size_t>(i)], pred[static_cast<size_t>(i)]}];
    }
    for (int g = 0; g < classes; ++g)
      for (int p = 0; p < classes; ++p) {
        auto it = tally.find({g, p});
        CHECK(acc.at(g, p) == (it == tally.end() ? 0 : it->second));
      }
  }
}

TEST_CASE("perfect predictions score 1.0") {
  ConfusionAccumulator acc(3);
  std::vector<int> map = {0, 1, 2, 0, 1, 2};
  accumulate(acc, map, map, 255);
  MetricResult r = mpa_miou(acc, {0, 1, 2});
  CHECK(r.mpa == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.miou == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("hand-computed two-class matrix") {
  ConfusionAccumulator acc(2);
  acc.at(0, 0) = 3;
  acc.at(0, 1) = 1;
  acc.at(1, 0) = 1;
  acc.at(1, 1) = 3;
  MetricResult r = mpa_miou(acc, {0, 1});
  CHECK(r.mpa == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(r.miou == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("classes absent from the ground truth are excluded from means") {
  ConfusionAccumulator acc(3);
  acc.at(0, 0) = 4;
  acc.at(1, 1) = 2;
  acc.at(1, 0) = 2;
  // class 2 has no gt pixels
  MetricResult r = mpa_miou(acc, {0, 1, 2});
  CHECK(r.scored_classes == 2);
  CHECK(r.mpa == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("mpa_miou rejects an empty filter") {
  ConfusionAccumulator acc(2);
  CHECK_THROWS_AS(mpa_miou(acc, {}), Error);
}

TEST_CASE("merge is element-wise and order independent") {
  Rng rng(7);
  ConfusionAccumulator whole(4);
  ConfusionAccumulator part1(4), part2(4), part3(4);
  ConfusionAccumulator* parts[3] = {&part1, &part2, &part3};
  for (int i = 0; i < 300; ++i) {
    int g = static_cast<int>(rng.uniform_int(0, 3));
    int p = static_cast<int>(rng.uniform_int(0, 3));
    whole.add(g, p);
    parts[i % 3]->add(g, p);
  }
  ConfusionAccumulator ab(4);
  ab.merge(part2);
  ab.merge(part1);
  ab.merge(part3);
  CHECK(ab.counts == whole.counts);
}

TEST_CASE("metric recomputation from raw pairs is exact") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const int classes = 5;
    std::vector<int> gt(128), pred(128);
    for (int i = 0; i < 128; ++i) {
      gt[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_int(0, classes - 1));
      pred[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_int(0, classes - 1));
    }
    ConfusionAccumulator acc(classes);
    accumulate(acc, gt, pred, 255);
    std::vector<int> filter = {0, 1, 2, 3, 4};
    MetricResult r = mpa_miou(acc, filter);
    // brute force from the raw pairs
    double pa_sum = 0, iou_sum = 0;
    int scored = 0;
    for (int c = 0; c < classes; ++c) {
      int64_t tp = 0, gt_n = 0, pred_n = 0;
      for (int i = 0; i < 128; ++i) {
        bool g = gt[static_cast<size_t>(i)] == c;
        bool p = pred[static_cast<size_t>(i)] == c;
        tp += g && p;
        gt_n += g;
        pred_n += p;
      }
      if (gt_n == 0) continue;
      ++scored;
      pa_sum += static_cast<double>(tp) / static_cast<double>(gt_n);
      iou_sum += static_cast<double>(tp) / static_cast<double>(gt_n + pred_n - tp);
    }
    CHECK(r.scored_classes == scored);
    CHECK(r.mpa == doctest::Approx(pa_sum / scored).epsilon(1e-12));
    CHECK(r.miou == doctest::Approx(iou_sum / scored).epsilon(1e-12));
    // IoU can never exceed PA
    for (const auto& s : r.per_class) CHECK(s.iou <= s.pa + 1e-12);
  }
}

TEST_CASE("flat protocol scoring rules") {
  // space: 0 = superclass, 1/2 = its subclasses, 3 = unrelated
  // pixel 0: argmax is the correct subclass
  // pixel 1: argmax is the superclass, runner-up correct
  // pixel 2: argmax is the superclass, runner-up wrong
  // pixel 3: gt outside the subclass set, left untouched
  Tensor sigma = Tensor::zeros({1, 4, 1, 4});
  auto set = [&](int pixel, std::initializer_list<double> probs) {
    int c = 0;
    for (double p : probs) {
      sigma.values()[static_cast<size_t>(c++ * 4 + pixel)] = static_cast<real_t>(p);
    }
  };
  set(0, {0.1, 0.7, 0.1, 0.1});
  set(1, {0.5, 0.3, 0.1, 0.1});
  set(2, {0.5, 0.1, 0.3, 0.1});
  set(3, {0.6, 0.1, 0.1, 0.2});
  std::vector<int> gt = {1, 1, 1, 3};
  std::vector<int> pred = flat_protocol_score(gt, sigma, 0, {1, 2});
  CHECK(pred[0] == 1);  // rule (1): already correct
  CHECK(pred[1] == 1);  // rule (2): second choice rescues the pixel
  CHECK(pred[2] == 2);  // counted as the wrong subclass
  CHECK(pred[3] == 0);  // untouched: plain argmax
}

TEST_CASE("flat protocol never alters pixels outside the subclass set") {
  Rng rng(13);
  Tensor sigma = random_tensor({1, 5, 4, 4}, rng, 0.0, 1.0);
  std::vector<int> gt(16);
  for (auto& g : gt) g = static_cast<int>(rng.uniform_int(0, 4));
  std::vector<int> plain = flat_protocol_score(gt, sigma, 0, {});
  std::vector<int> scored = flat_protocol_score(gt, sigma, 0, {1, 2});
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] != 1 && gt[i] != 2) CHECK(scored[i] == plain[i]);
  }
}

TEST_CASE("flat protocol rejects ids outside the space") {
  Tensor sigma = Tensor::zeros({1, 3, 1, 1});
  std::vector<int> gt = {0};
  CHECK_THROWS_AS(flat_protocol_score(gt, sigma, 5, {1}), Error);
  CHECK_THROWS_AS(flat_protocol_score(gt, sigma, 0, {7}), Error);
}

TEST_CASE("evaluated-class filter thresholds") {
  // 43 subclasses; 15 of them fall at or below the threshold on one split
  std::vector<int64_t> train(43), val(43);
  for (int c = 0; c < 43; ++c) {
    train[static_cast<size_t>(c)] = c < 15 ? 500 : 5000;
    val[static_cast<size_t>(c)] = 2000;
  }
  auto subset = filter_evaluated_classes({{"train", train}, {"val", val}}, 1000, true);
  CHECK(subset.size() == 28);

  // threshold 0 keeps every class with at least one pixel
  std::vector<int64_t> sparse = {0, 1, 17, 0, 3};
  auto nonzero = filter_evaluated_classes({{"train", sparse}}, 0, true);
  CHECK(nonzero == std::vector<int>{1, 2, 4});

  // the opposite comparison direction selects count-capped classes
  auto capped = filter_evaluated_classes({{"train", train}, {"val", val}}, 1000, false);
  CHECK(capped.empty());  // val counts violate the cap everywhere
  auto capped_train = filter_evaluated_classes({{"train", train}}, 1000, false);
  CHECK(capped_train.size() == 15);
}

TEST_CASE("filter matches a direct count oracle on random stats") {
  Rng rng(17);
  std::vector<int64_t> a(20), b(20);
  for (size_t i = 0; i < 20; ++i) {
    a[i] = rng.uniform_int(0, 3000);
    b[i] = rng.uniform_int(0, 3000);
  }
  auto subset = filter_evaluated_classes({{"a", a}, {"b", b}}, 1500, true);
  std::vector<int> expect;
  for (int c = 0; c < 20; ++c) {
    if (a[static_cast<size_t>(c)] > 1500 && b[static_cast<size_t>(c)] > 1500)
      expect.push_back(c);
  }
  CHECK(subset == expect);
}

TEST_CASE("metric table formatting") {
  ConfusionAccumulator acc(2);
  acc.at(0, 0) = 3;
  acc.at(0, 1) = 1;
  acc.at(1, 1) = 4;
  MetricResult r = mpa_miou(acc, {0, 1});
  std::string table = format_metric_table(r, {"road", "sign"});
  CHECK(table.find("road") != std::string::npos);
  CHECK(table.find("mPA") != std::string::npos);
}

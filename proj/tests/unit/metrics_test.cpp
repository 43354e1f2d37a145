#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "wseg/errors.hpp"
#include "wseg/metrics.hpp"

using namespace wseg;
namespace fs = std::filesystem;

namespace {

// Fills a rectangle [y0,y1) x [x0,x1) of batch element b with one id.
void blob(LabelMap& m, std::int64_t b, std::int64_t y0, std::int64_t y1, std::int64_t x0,
          std::int64_t x1, std::int32_t id) {
  for (std::int64_t y = y0; y < y1; ++y) {
    for (std::int64_t x = x0; x < x1; ++x) m.at(b, y, x) = id;
  }
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("perfect predictions score one") {
  LabelMap gt(1, 4, 4);
  gt.v = {0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 0, 0, 2, 2, 0, 0};
  ConfusionMatrix conf(3);
  conf.add(gt, gt);
  const SegScores s = miou(conf);
  CHECK(s.miou == 1.0);
  CHECK(s.class_avg == 1.0);
  CHECK(s.global_avg == 1.0);
}

TEST_CASE("half swapped classes score one third") {
  ConfusionMatrix conf(2);
  conf.at(0, 0) = 5;
  conf.at(0, 1) = 5;
  conf.at(1, 0) = 5;
  conf.at(1, 1) = 5;
  const SegScores s = miou(conf);
  CHECK(s.miou == doctest::Approx(1.0 / 3.0));
  CHECK(s.class_avg == doctest::Approx(0.5));
  CHECK(s.global_avg == doctest::Approx(0.5));
}

TEST_CASE("classes absent from ground truth are excluded") {
  ConfusionMatrix conf(3);
  conf.at(0, 0) = 5;
  conf.at(0, 1) = 5;  // class 1 appears only as a false prediction
  const SegScores s = miou(conf);
  CHECK(s.miou == doctest::Approx(0.5));
  CHECK(s.class_avg == doctest::Approx(0.5));
  CHECK(s.global_avg == doctest::Approx(0.5));
}

TEST_CASE("empty confusion matrices are rejected") {
  ConfusionMatrix conf(3);
  CHECK_THROWS_AS(miou(conf), UsageError);
  CHECK_THROWS_AS(ConfusionMatrix(0), ConfigError);
}

TEST_CASE("label accumulation validates inputs") {
  LabelMap gt(1, 2, 2);
  gt.v = {0, 1, 1, 0};
  LabelMap pred(1, 2, 2);
  pred.v = {0, 1, 0, 0};
  ConfusionMatrix conf(2);
  conf.add(gt, pred);
  CHECK(conf.at(0, 0) == 2);
  CHECK(conf.at(1, 1) == 1);
  CHECK(conf.at(1, 0) == 1);
  CHECK(conf.total() == 4);

  LabelMap wide(1, 2, 3);
  CHECK_THROWS_AS(conf.add(gt, wide), ShapeError);
  LabelMap big(1, 2, 2);
  big.v = {0, 2, 0, 0};
  CHECK_THROWS_AS(conf.add(gt, big), UsageError);
}

TEST_CASE("permuting class labels leaves scores unchanged") {
  LabelMap gt(1, 3, 3);
  gt.v = {0, 0, 1, 1, 2, 2, 0, 1, 2};
  LabelMap pred(1, 3, 3);
  pred.v = {0, 1, 1, 1, 2, 0, 0, 2, 2};
  ConfusionMatrix a(3);
  a.add(gt, pred);
  const SegScores sa = miou(a);

  const std::array<std::int32_t, 3> perm = {1, 2, 0};
  LabelMap gt_p = gt, pred_p = pred;
  for (std::size_t i = 0; i < gt.v.size(); ++i) {
    gt_p.v[i] = perm[static_cast<std::size_t>(gt.v[i])];
    pred_p.v[i] = perm[static_cast<std::size_t>(pred.v[i])];
  }
  ConfusionMatrix b(3);
  b.add(gt_p, pred_p);
  const SegScores sb = miou(b);
  CHECK(sa.miou == doctest::Approx(sb.miou));
  CHECK(sa.class_avg == doctest::Approx(sb.class_avg));
  CHECK(sa.global_avg == doctest::Approx(sb.global_avg));
}

TEST_CASE("identical instance labelings give perfect ap") {
  LabelMap gt(1, 8, 8);
  blob(gt, 0, 1, 4, 1, 4, 1);
  blob(gt, 0, 5, 7, 5, 7, 2);
  InstanceApAccumulator acc;
  acc.add(gt, {{0.9, 0.8}}, gt);
  const ApResult r = acc.result();
  CHECK(r.ap == doctest::Approx(1.0));
  CHECK(r.ap50 == doctest::Approx(1.0));
}

TEST_CASE("disjoint predictions give zero ap") {
  LabelMap gt(1, 8, 8);
  blob(gt, 0, 0, 2, 0, 2, 1);
  LabelMap pred(1, 8, 8);
  blob(pred, 0, 5, 7, 5, 7, 1);
  CHECK(instance_ap({pred, {{4}}}, {{0.9}}, gt).ap == 0.0);

  LabelMap none(1, 8, 8);
  const ApResult empty_pred = instance_ap({none, {{}}}, {{}}, gt);
  CHECK(empty_pred.ap == 0.0);
  CHECK(empty_pred.ap50 == 0.0);

  // Without ground truth there is nothing to recall.
  CHECK(instance_ap({pred, {{4}}}, {{0.9}}, none).ap == 0.0);
}

TEST_CASE("an exact half overlap matches only at the lowest threshold") {
  LabelMap gt(1, 8, 8);
  blob(gt, 0, 2, 4, 2, 4, 1);
  LabelMap pred(1, 8, 8);
  blob(pred, 0, 2, 4, 2, 6, 1);  // intersection 4, union 8
  const ApResult r = instance_ap({pred, {{8}}}, {{0.9}}, gt);
  CHECK(r.ap50 == doctest::Approx(1.0));
  CHECK(r.ap == doctest::Approx(0.1));
}

TEST_CASE("ranking by confidence drives precision") {
  LabelMap gt(1, 8, 8);
  blob(gt, 0, 2, 4, 2, 4, 1);
  LabelMap pred(1, 8, 8);
  blob(pred, 0, 5, 7, 5, 7, 1);  // confident miss
  blob(pred, 0, 2, 4, 2, 4, 2);  // hesitant hit
  const ApResult r = instance_ap({pred, {{4, 4}}}, {{0.9, 0.5}}, gt);
  CHECK(r.ap == doctest::Approx(0.5));
  CHECK(r.ap50 == doctest::Approx(0.5));
}

TEST_CASE("each ground truth matches at most once") {
  LabelMap gt(1, 8, 8);
  blob(gt, 0, 2, 4, 1, 5, 1);  // 2 x 4 block
  // Two disjoint halves of the block, each with IoU exactly 0.5 against it.
  LabelMap pred(1, 8, 8);
  blob(pred, 0, 2, 4, 1, 3, 1);
  blob(pred, 0, 2, 4, 3, 5, 2);
  const ApResult r = instance_ap({pred, {{4, 4}}}, {{0.9, 0.5}}, gt);
  // At 0.5 the confident half claims the block and the other half becomes a
  // false positive; were double matching allowed the score would exceed one.
  CHECK(r.ap50 == doctest::Approx(1.0));
  CHECK(r.ap == doctest::Approx(0.1));
}

TEST_CASE("partial overlap below a threshold stays unmatched above it") {
  LabelMap gt(1, 8, 8);
  blob(gt, 0, 2, 4, 1, 5, 1);
  LabelMap pred(1, 8, 8);
  blob(pred, 0, 2, 4, 1, 4, 1);  // IoU 6/8 = 0.75
  const ApResult r = instance_ap({pred, {{6}}}, {{0.9}}, gt);
  // Six thresholds (0.50 through 0.75) score one, the remaining four zero.
  CHECK(r.ap50 == doctest::Approx(1.0));
  CHECK(r.ap == doctest::Approx(0.6));
}

TEST_CASE("higher confidence claims a shared ground truth first") {
  LabelMap gt(1, 8, 8);
  blob(gt, 0, 2, 4, 1, 5, 1);
  LabelMap pred(1, 8, 8);
  blob(pred, 0, 2, 4, 1, 5, 1);  // exact, confidence 0.9
  blob(pred, 0, 4, 6, 1, 5, 2);  // disjoint, confidence 0.5
  const ApResult r = instance_ap({pred, {{8, 8}}}, {{0.9, 0.5}}, gt);
  CHECK(r.ap == doctest::Approx(1.0));

  // Swapping confidences puts the miss first; the hit at rank two halves
  // every per-threshold score.
  const ApResult swapped = instance_ap({pred, {{8, 8}}}, {{0.5, 0.9}}, gt);
  CHECK(swapped.ap == doctest::Approx(0.5));
}

TEST_CASE("instance id permutation leaves ap unchanged") {
  LabelMap gt(1, 8, 8);
  blob(gt, 0, 2, 4, 1, 5, 1);
  LabelMap a(1, 8, 8);
  blob(a, 0, 2, 4, 1, 4, 1);
  blob(a, 0, 2, 4, 4, 5, 2);
  LabelMap b(1, 8, 8);
  blob(b, 0, 2, 4, 1, 4, 2);
  blob(b, 0, 2, 4, 4, 5, 1);
  const ApResult ra = instance_ap({a, {{6, 2}}}, {{0.9, 0.5}}, gt);
  const ApResult rb = instance_ap({b, {{2, 6}}}, {{0.5, 0.9}}, gt);
  CHECK(ra.ap == doctest::Approx(rb.ap));
  CHECK(ra.ap50 == doctest::Approx(rb.ap50));
}

TEST_CASE("the accumulator pools detections across images") {
  InstanceApAccumulator acc;

  LabelMap gt1(1, 8, 8);
  blob(gt1, 0, 2, 4, 2, 4, 1);
  acc.add(gt1, {{0.9}}, gt1);

  LabelMap gt2(1, 8, 8);
  blob(gt2, 0, 2, 4, 2, 4, 1);
  LabelMap miss(1, 8, 8);
  blob(miss, 0, 5, 7, 5, 7, 1);
  acc.add(miss, {{0.8}}, gt2);

  const ApResult r = acc.result();
  CHECK(r.ap == doctest::Approx(0.5));
  CHECK(r.ap50 == doctest::Approx(0.5));
}

TEST_CASE("ap inputs are validated") {
  LabelMap gt(1, 8, 8);
  LabelMap wide(1, 8, 9);
  InstanceApAccumulator acc;
  CHECK_THROWS_AS(acc.add(wide, {{}}, gt), ShapeError);
  CHECK_THROWS_AS(acc.add(gt, {}, gt), UsageError);
  LabelMap pred(1, 8, 8);
  blob(pred, 0, 0, 2, 0, 2, 1);
  CHECK_THROWS_AS(acc.add(pred, {{}}, gt), UsageError);
  CHECK_THROWS_AS(InstanceApAccumulator(std::vector<double>{}), ConfigError);
}

TEST_CASE("area confidences scale by the largest instance") {
  InstanceLabeling lbl;
  lbl.areas = {{40, 6}, {}};
  const auto conf = area_confidences(lbl);
  REQUIRE(conf.size() == 2);
  REQUIRE(conf[0].size() == 2);
  CHECK(conf[0][0] == doctest::Approx(1.0));
  CHECK(conf[0][1] == doctest::Approx(0.15));
  CHECK(conf[1].empty());
}

TEST_CASE("mean shift separates far clusters") {
  Tensor coords = zeros({1, 2, 1, 6});
  const std::array<double, 6> xs = {0.0, 0.1, 0.2, 5.0, 5.1, 5.2};
  for (int i = 0; i < 6; ++i) coords.data()[i] = xs[static_cast<std::size_t>(i)];
  Tensor mask = full({1, 1, 1, 6}, 1.0);
  const MeanShiftResult res = meanshift_oracle(coords, mask, 1.0, 50);
  REQUIRE(res.labeling.areas.size() == 1);
  CHECK(res.labeling.areas[0] == std::vector<std::int64_t>{3, 3});
  const std::int32_t left = res.labeling.ids.at(0, 0, 0);
  const std::int32_t right = res.labeling.ids.at(0, 0, 3);
  CHECK(left != right);
  CHECK(left >= 1);
  CHECK(right >= 1);
  for (int i = 0; i < 3; ++i) {
    CHECK(res.labeling.ids.at(0, 0, i) == left);
    CHECK(res.labeling.ids.at(0, 0, i + 3) == right);
  }
}

TEST_CASE("identical points collapse in one sweep") {
  Tensor coords = full({1, 2, 1, 5}, 2.5);
  Tensor mask = full({1, 1, 1, 5}, 1.0);
  const MeanShiftResult res = meanshift_oracle(coords, mask, 0.5, 30);
  CHECK(res.labeling.areas[0] == std::vector<std::int64_t>{5});
  CHECK(res.kernel_evals == 25);  // one converged iteration per point
}

TEST_CASE("jittered centers resolve to their own modes") {
  const std::array<std::pair<double, double>, 3> centers = {
      {{0.0, 0.0}, {4.0, 0.0}, {0.0, 4.0}}};
  const std::array<std::pair<double, double>, 3> jit = {
      {{0.25, 0.0}, {-0.2, 0.1}, {0.0, -0.25}}};
  Tensor coords = zeros({1, 2, 1, 9});
  Tensor mask = full({1, 1, 1, 9}, 1.0);
  for (int c = 0; c < 3; ++c) {
    for (int j = 0; j < 3; ++j) {
      const int i = c * 3 + j;
      coords.data()[i] = centers[static_cast<std::size_t>(c)].first +
                         jit[static_cast<std::size_t>(j)].first;
      coords.data()[9 + i] = centers[static_cast<std::size_t>(c)].second +
                             jit[static_cast<std::size_t>(j)].second;
    }
  }
  const MeanShiftResult res = meanshift_oracle(coords, mask, 1.0, 50);
  CHECK(res.labeling.areas[0] == std::vector<std::int64_t>({3, 3, 3}));
  for (int c = 0; c < 3; ++c) {
    const std::int32_t id = res.labeling.ids.at(0, 0, c * 3);
    CHECK(id >= 1);
    for (int j = 1; j < 3; ++j) CHECK(res.labeling.ids.at(0, 0, c * 3 + j) == id);
  }
  CHECK(res.kernel_evals <= 50 * 9 * 9);
}

TEST_CASE("mean shift validates arguments") {
  Tensor coords = zeros({1, 2, 2, 2});
  Tensor mask = zeros({1, 1, 2, 2});
  CHECK_THROWS_AS(meanshift_oracle(coords, mask, 0.0, 10), ConfigError);
  CHECK_THROWS_AS(meanshift_oracle(coords, mask, -1.0, 10), ConfigError);
  CHECK_THROWS_AS(meanshift_oracle(coords, mask, 1.0, 0), ConfigError);
  Tensor bad = zeros({1, 3, 2, 2});
  CHECK_THROWS_AS(meanshift_oracle(bad, mask, 1.0, 10), ShapeError);
  Tensor small_mask = zeros({1, 1, 2, 1});
  CHECK_THROWS_AS(meanshift_oracle(coords, small_mask, 1.0, 10), ShapeError);

  const MeanShiftResult res = meanshift_oracle(coords, mask, 1.0, 10);
  CHECK(res.kernel_evals == 0);
  REQUIRE(res.labeling.areas.size() == 1);
  CHECK(res.labeling.areas[0].empty());
  for (std::int32_t v : res.labeling.ids.v) CHECK(v == 0);
}

TEST_CASE("metrics csv emits stable bytes") {
  const fs::path dir = fs::temp_directory_path() / "wseg_csv_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const SegScores seg{0.5, 0.25, 0.125};
  const ApResult ap{0.8125, 0.9};
  const std::string expected =
      "epoch,split,miou,class_avg,global_avg,ap,ap50\n"
      "1,train,0.500000,0.250000,0.125000,0.812500,0.900000\n"
      "2,val,0.500000,0.250000,0.125000,0.812500,0.900000\n";

  for (const char* name : {"a.csv", "b.csv"}) {
    const std::string path = (dir / name).string();
    MetricsCsv csv(path);
    csv.append(1, "train", seg, ap);
    csv.append(2, "val", seg, ap);
    CHECK(slurp(path) == expected);
  }
}

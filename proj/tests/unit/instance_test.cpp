#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>
#include <vector>

#include "support/reference_ops.hpp"
#include "wseg/instance.hpp"
#include "wseg/sampler.hpp"
#include "wseg/tensor.hpp"

using namespace wseg;
using wseg_test::max_abs_diff;
using wseg_test::partitions_equal;
using wseg_test::random_tensor;

namespace {

// Offset field stepping at most one pixel per axis toward each instance's
// centroid; zero outside instances.
Tensor step_offsets_toward_centers(const LabelMap& inst) {
  const std::int64_t B = inst.batch, H = inst.h, W = inst.w;
  CentroidTargets tg = centroid_targets(inst);
  Tensor off(Shape{B, 2, H, W});
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        if (inst.at(b, y, x) == 0) continue;
        const double cx = denorm_coord(tg.coords.at(b, 0, y, x), W);
        const double cy = denorm_coord(tg.coords.at(b, 1, y, x), H);
        const double sx = std::clamp(cx - static_cast<double>(x), -1.0, 1.0);
        const double sy = std::clamp(cy - static_cast<double>(y), -1.0, 1.0);
        off.at(b, 0, y, x) = W > 1 ? 2.0 * sx / static_cast<double>(W - 1) : 0.0;
        off.at(b, 1, y, x) = H > 1 ? 2.0 * sy / static_cast<double>(H - 1) : 0.0;
      }
    }
  }
  return off;
}

std::int64_t count_holding_center(const Tensor& map, const CentroidTargets& tg,
                                  const LabelMap& inst) {
  std::int64_t n = 0;
  for (std::int64_t b = 0; b < inst.batch; ++b) {
    for (std::int64_t y = 0; y < inst.h; ++y) {
      for (std::int64_t x = 0; x < inst.w; ++x) {
        if (inst.at(b, y, x) == 0) continue;
        if (map.at(b, 0, y, x) == tg.coords.at(b, 0, y, x) &&
            map.at(b, 1, y, x) == tg.coords.at(b, 1, y, x)) {
          ++n;
        }
      }
    }
  }
  return n;
}

}  // namespace

TEST_CASE("centroid_targets places block centers") {
  LabelMap inst(1, 9, 9);
  for (std::int64_t y = 2; y <= 4; ++y) {
    for (std::int64_t x = 2; x <= 4; ++x) inst.at(0, y, x) = 7;
  }
  CentroidTargets tg = centroid_targets(inst);
  const double want = norm_coord(3.0, 9);  // = -0.25
  CHECK(want == doctest::Approx(-0.25).epsilon(1e-15));
  for (std::int64_t y = 0; y < 9; ++y) {
    for (std::int64_t x = 0; x < 9; ++x) {
      const bool in = y >= 2 && y <= 4 && x >= 2 && x <= 4;
      CHECK(tg.mask.at(0, 0, y, x) == (in ? 1.0 : 0.0));
      if (in) {
        CHECK(tg.coords.at(0, 0, y, x) == want);
        CHECK(tg.coords.at(0, 1, y, x) == want);
      } else {
        CHECK(tg.coords.at(0, 0, y, x) == 0.0);
      }
    }
  }
}

TEST_CASE("centroid_targets respects symmetry and handles empty maps") {
  // Plus shape centered at (4, 4) of a 9x9 image: center exactly at 0.
  LabelMap inst(1, 9, 9);
  for (std::int64_t k = 2; k <= 6; ++k) {
    inst.at(0, 4, k) = 1;
    inst.at(0, k, 4) = 1;
  }
  CentroidTargets tg = centroid_targets(inst);
  CHECK(tg.coords.at(0, 0, 4, 2) == 0.0);
  CHECK(tg.coords.at(0, 1, 2, 4) == 0.0);

  LabelMap empty(2, 5, 5);
  CentroidTargets te = centroid_targets(empty);
  for (double v : te.mask.values()) CHECK(v == 0.0);
  for (double v : te.coords.values()) CHECK(v == 0.0);
}

TEST_CASE("centroid_targets separates instances and batch elements") {
  LabelMap inst(2, 6, 8);
  //  Image 0: two instances; image 1: one shifted instance with the same id.
  inst.at(0, 1, 1) = 3;
  inst.at(0, 1, 2) = 3;
  inst.at(0, 4, 6) = 9;
  inst.at(1, 5, 7) = 3;
  CentroidTargets tg = centroid_targets(inst);
  CHECK(tg.coords.at(0, 0, 1, 1) == norm_coord(1.5, 8));
  CHECK(tg.coords.at(0, 0, 1, 2) == norm_coord(1.5, 8));
  CHECK(tg.coords.at(0, 1, 1, 1) == norm_coord(1.0, 6));
  CHECK(tg.coords.at(0, 0, 4, 6) == norm_coord(6.0, 8));
  CHECK(tg.coords.at(1, 0, 5, 7) == norm_coord(7.0, 8));
  CHECK(tg.mask.at(1, 0, 1, 1) == 0.0);
}

TEST_CASE("diffuse fixed points: t=0 and zero offsets") {
  SampleGrid g = regular_grid(5, 7, 1);
  Tensor zero(Shape{2, 2, 5, 7});
  Tensor t0 = diffuse(zero, 0, SampleMode::kNearest, nullptr);
  for (std::int64_t b = 0; b < 2; ++b) {
    for (std::int64_t i = 0; i < 2 * 35; ++i) {
      CHECK(t0.data()[b * 70 + i] == g.coords.data()[i]);
    }
  }
  for (SampleMode m : {SampleMode::kNearest, SampleMode::kBilinear}) {
    Tensor t5 = diffuse(zero, 5, m, nullptr);
    CHECK(max_abs_diff(t5, t0) == 0.0);
  }
  CHECK_THROWS_AS(diffuse(zero, -1, SampleMode::kNearest, nullptr), ConfigError);
  Tensor bad(Shape{1, 3, 5, 7});
  CHECK_THROWS_AS(diffuse(bad, 1, SampleMode::kNearest, nullptr), ShapeError);
}

TEST_CASE("diffuse row toward pixel 3 matches the integer-step oracle") {
  // One instance spanning a 1x8 row, offsets stepping one pixel toward
  // pixel 3. After 4 steps every pixel holds pixel 3's coordinate.
  const std::int64_t W = 8;
  Tensor off(Shape{1, 2, 1, W});
  std::vector<std::int64_t> step(W);
  for (std::int64_t x = 0; x < W; ++x) {
    step[x] = x < 3 ? 1 : (x > 3 ? -1 : 0);
    off.at(0, 0, 0, x) = 2.0 * static_cast<double>(step[x]) / static_cast<double>(W - 1);
  }
  SampleGrid g = regular_grid(1, W, 1);
  std::vector<std::int64_t> val(W);
  for (std::int64_t x = 0; x < W; ++x) val[x] = x;
  for (int t = 1; t <= 4; ++t) {
    // Independent simulation: each step re-reads from the stepped position.
    std::vector<std::int64_t> nv(W);
    for (std::int64_t x = 0; x < W; ++x) nv[x] = val[x + step[x]];
    val = nv;
    Tensor map = diffuse(off, t, SampleMode::kNearest, nullptr);
    for (std::int64_t x = 0; x < W; ++x) {
      CHECK(map.at(0, 0, 0, x) == g.coords.at(0, 0, 0, val[x]));
    }
  }
  Tensor final = diffuse(off, 4, SampleMode::kNearest, nullptr);
  for (std::int64_t x = 0; x < W; ++x) {
    CHECK(final.at(0, 0, 0, x) == g.coords.at(0, 0, 0, 3));
  }
}

TEST_CASE("offsets aiming exactly at a center collapse in one bilinear step") {
  const std::int64_t H = 5, W = 5;
  LabelMap inst(1, H, W);
  for (auto& v : inst.v) v = 1;  // whole image is one instance, center (2,2)
  CentroidTargets tg = centroid_targets(inst);
  Tensor off(Shape{1, 2, H, W});
  SampleGrid g = regular_grid(H, W, 1);
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t x = 0; x < W; ++x) {
      off.at(0, 0, y, x) = tg.coords.at(0, 0, y, x) - g.coords.at(0, 0, y, x);
      off.at(0, 1, y, x) = tg.coords.at(0, 1, y, x) - g.coords.at(0, 1, y, x);
    }
  }
  Tensor map = diffuse(off, 1, SampleMode::kBilinear, nullptr);
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t x = 0; x < W; ++x) {
      CHECK(map.at(0, 0, y, x) == tg.coords.at(0, 0, y, x));
      CHECK(map.at(0, 1, y, x) == tg.coords.at(0, 1, y, x));
    }
  }
}

TEST_CASE("diffusion coverage grows monotonically and saturates at the radius") {
  // 9x5 rectangle in a 16x16 image: integer centroid, Chebyshev radius 4.
  LabelMap inst(1, 16, 16);
  for (std::int64_t y = 3; y <= 7; ++y) {
    for (std::int64_t x = 2; x <= 10; ++x) inst.at(0, y, x) = 1;
  }
  CentroidTargets tg = centroid_targets(inst);
  Tensor off = step_offsets_toward_centers(inst);
  const std::int64_t area = 9 * 5;
  std::int64_t prev = -1;
  for (int t = 0; t <= 6; ++t) {
    Tensor map = diffuse(off, t, SampleMode::kNearest, nullptr);
    const std::int64_t n = count_holding_center(map, tg, inst);
    CHECK(n >= prev);
    prev = n;
    if (t >= 4) CHECK(n == area);
    if (t < 4) CHECK(n < area);
  }
}

TEST_CASE("shared-table gradients accumulate across diffusion steps") {
  Tensor off = random_tensor(Shape{1, 2, 4, 4}, 401, 0.01, 0.04, true);
  auto f = [](const std::vector<Tensor>& in, Tape& t) {
    Tensor map = diffuse(in[0], 2, SampleMode::kBilinear, &t);
    return sum(mul(map, map, &t), &t);
  };
  CHECK(grad_check(f, {off}, 1e-5) < 1e-4);

  // The two-step gradient must differ from the single-step gradient: the
  // table is genuinely shared, not re-read once.
  auto grad_for = [&](int steps) {
    Tensor o = off.clone();
    o.set_requires_grad(true);
    Tape tape;
    Tensor map = diffuse(o, steps, SampleMode::kBilinear, &tape);
    Tensor loss = sum(mul(map, map, &tape), &tape);
    backward(loss, tape);
    return o.grad_vec();
  };
  const auto g1 = grad_for(1);
  const auto g2 = grad_for(2);
  double diff = 0;
  for (std::size_t i = 0; i < g1.size(); ++i) diff = std::max(diff, std::abs(g1[i] - g2[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("instance_loss values match hand calculations") {
  Tensor pred(Shape{1, 2, 1, 1});
  CentroidTargets tg;
  tg.coords = Tensor(Shape{1, 2, 1, 1});
  tg.mask = full(Shape{1, 1, 1, 1}, 1.0);
  pred.at(0, 0, 0, 0) = 0.3;
  pred.at(0, 1, 0, 0) = 0.4;
  CHECK(instance_loss(pred, tg, InstanceLossKind::kL2, nullptr).data()[0] ==
        doctest::Approx(0.5).epsilon(1e-14));
  CHECK(instance_loss(pred, tg, InstanceLossKind::kL1, nullptr).data()[0] ==
        doctest::Approx(0.7).epsilon(1e-14));
  CHECK(instance_loss(pred, tg, InstanceLossKind::kSmoothL1, nullptr).data()[0] ==
        doctest::Approx(0.125).epsilon(1e-14));

  // Perfect prediction and empty mask both give zero.
  Tensor zero(Shape{1, 2, 1, 1});
  CHECK(instance_loss(zero, tg, InstanceLossKind::kL2, nullptr).data()[0] == 0.0);
  tg.mask = Tensor(Shape{1, 1, 1, 1});
  CHECK(instance_loss(pred, tg, InstanceLossKind::kL2, nullptr).data()[0] == 0.0);

  Tensor badpred(Shape{1, 2, 2, 2});
  CHECK_THROWS_AS(instance_loss(badpred, tg, InstanceLossKind::kL2, nullptr), ShapeError);
}

TEST_CASE("smooth L1 never exceeds L1 and loss gradients check out") {
  const Shape s{2, 2, 6, 6};
  Tensor pred = random_tensor(s, 411, -0.9, 0.9, true);
  CentroidTargets tg;
  tg.coords = random_tensor(s, 412, -0.9, 0.9);
  tg.mask = Tensor(Shape{2, 1, 6, 6});
  Rng rng(413);
  for (double& v : tg.mask.values()) v = rng.uniform() < 0.6 ? 1.0 : 0.0;

  const double l1 = instance_loss(pred, tg, InstanceLossKind::kL1, nullptr).data()[0];
  const double sm = instance_loss(pred, tg, InstanceLossKind::kSmoothL1, nullptr).data()[0];
  CHECK(sm <= l1);

  for (InstanceLossKind kind :
       {InstanceLossKind::kL2, InstanceLossKind::kL1, InstanceLossKind::kSmoothL1}) {
    auto f = [&tg, kind](const std::vector<Tensor>& in, Tape& t) {
      return instance_loss(in[0], tg, kind, &t);
    };
    CHECK(grad_check(f, {pred}, 1e-5) < 1e-5);
  }

  // Empty mask: zero loss, no gradient flow.
  CentroidTargets none;
  none.coords = Tensor(s);
  none.mask = Tensor(Shape{2, 1, 6, 6});
  Tensor p2 = random_tensor(s, 414, -1, 1, true);
  Tape tape;
  Tensor loss = instance_loss(p2, none, InstanceLossKind::kL2, &tape);
  backward(loss, tape);
  CHECK(loss.data()[0] == 0.0);
  CHECK_FALSE(p2.has_grad());
}

TEST_CASE("extract_instances thresholds and orders by area") {
  // Two constant regions: 40 pixels at center (1,1), 3 at (6,1), rest is the
  // identity grid (all-distinct values).
  const std::int64_t H = 10, W = 10;
  SampleGrid g = regular_grid(H, W, 1);
  Tensor map = Tensor(Shape{1, 2, H, W});
  std::copy(g.coords.data(), g.coords.data() + 200, map.data());
  std::int64_t placed = 0;
  for (std::int64_t y = 0; y < H && placed < 40; ++y) {
    for (std::int64_t x = 0; x < 4 && placed < 40; ++x, ++placed) {
      map.at(0, 0, y, x) = norm_coord(1.0, W);
      map.at(0, 1, y, x) = norm_coord(1.0, H);
    }
  }
  // Second cluster aims at (1, 8), a pixel inside the first cluster's block,
  // so no untouched grid pixel shares its key.
  for (std::int64_t k = 0; k < 3; ++k) {
    map.at(0, 0, 9, 4 + k) = norm_coord(1.0, W);
    map.at(0, 1, 9, 4 + k) = norm_coord(8.0, H);
  }
  InstanceLabeling lab = extract_instances(map, 5);
  CHECK(lab.areas[0].size() == 1);
  CHECK(lab.areas[0][0] == 40);
  std::int64_t nonzero = 0;
  for (auto v : lab.ids.v) nonzero += v != 0;
  CHECK(nonzero == 40);

  // All-distinct map: nothing reaches an area of 2.
  Tensor grid_map(Shape{1, 2, H, W});
  std::copy(g.coords.data(), g.coords.data() + 200, grid_map.data());
  InstanceLabeling none = extract_instances(grid_map, 2);
  CHECK(none.areas[0].empty());
  for (auto v : none.ids.v) CHECK(v == 0);

  // Dense ids ordered by decreasing area; areas sum to labeled pixels.
  for (std::int64_t k = 0; k < 3; ++k) {
    map.at(0, 0, 8, 4 + k) = norm_coord(1.0, W);
    map.at(0, 1, 8, 4 + k) = norm_coord(8.0, H);
  }
  InstanceLabeling two = extract_instances(map, 5);
  CHECK(two.areas[0] == std::vector<std::int64_t>{40, 6});
}

TEST_CASE("perfect diffusion of a two-rectangle scene recovers the labeling") {
  LabelMap inst(1, 20, 20);
  for (std::int64_t y = 2; y <= 8; ++y) {
    for (std::int64_t x = 3; x <= 9; ++x) inst.at(0, y, x) = 5;
  }
  for (std::int64_t y = 11; y <= 17; ++y) {
    for (std::int64_t x = 10; x <= 18; ++x) inst.at(0, y, x) = 2;
  }
  Tensor off = step_offsets_toward_centers(inst);
  Tensor map = diffuse(off, 5, SampleMode::kNearest, nullptr);
  InstanceLabeling lab = extract_instances(map, 5);
  CHECK(lab.areas[0].size() == 2);
  CHECK(partitions_equal(lab.ids, inst));
}

TEST_CASE("upsample_instance_output preserves values in nearest mode") {
  Tensor map = random_tensor(Shape{1, 2, 4, 4}, 421, -0.8, 0.8);
  Tensor raw(Shape{1, 2, 4, 4});
  IgumConfig cfg;
  cfg.factor = 2;
  cfg.mode = SampleMode::kNearest;
  Tensor up = upsample_instance_output(map, raw, cfg, nullptr);
  CHECK(up.shape() == Shape{1, 2, 8, 8});
  std::set<double> pool(map.values().begin(), map.values().end());
  for (double v : up.values()) CHECK(pool.count(v) == 1);

  // Random (nonzero) offsets still cannot invent coordinate values.
  Tensor raw2 = random_tensor(Shape{1, 2, 4, 4}, 422, -0.5, 0.5);
  Tensor up2 = upsample_instance_output(map, raw2, cfg, nullptr);
  for (double v : up2.values()) CHECK(pool.count(v) == 1);

  // On a constant map, bilinear and nearest agree.
  Tensor cmap = full(Shape{1, 2, 4, 4}, 0.33);
  IgumConfig bcfg = cfg;
  bcfg.mode = SampleMode::kBilinear;
  Tensor un = upsample_instance_output(cmap, raw2, cfg, nullptr);
  Tensor ub = upsample_instance_output(cmap, raw2, bcfg, nullptr);
  CHECK(max_abs_diff(un, ub) < 1e-12);

  Tensor bad(Shape{1, 3, 4, 4});
  CHECK_THROWS_AS(upsample_instance_output(bad, raw, cfg, nullptr), ShapeError);
}

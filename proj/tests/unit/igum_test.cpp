#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "support/reference_ops.hpp"
#include "wseg/igum.hpp"
#include "wseg/sampler.hpp"
#include "wseg/tensor.hpp"

using namespace wseg;
using wseg_test::max_abs_diff;
using wseg_test::nearest_upsample_ref;
using wseg_test::random_tensor;

TEST_CASE("upsample_offsets basics") {
  // Constant table stays constant.
  Tensor c = full(Shape{2, 2, 3, 4}, 0.37);
  Tensor up = upsample_offsets(c, 4, nullptr);
  CHECK(up.shape() == Shape{2, 2, 12, 16});
  for (double v : up.values()) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));

  // Factor 1 is the identity.
  Tensor r = random_tensor(Shape{1, 2, 5, 5}, 301, -0.9, 0.9);
  CHECK(max_abs_diff(upsample_offsets(r, 1, nullptr), r) == 0.0);

  // Hand example: [0, 0.5] doubles to [0, 0.125, 0.375, 0.5].
  Tensor t = Tensor::from_vector(Shape{1, 2, 1, 2}, {0.0, 0.5, 0.0, 0.0});
  Tensor u = upsample_offsets(t, 2, nullptr);
  const std::vector<double> want{0.0, 0.125, 0.375, 0.5};
  for (int j = 0; j < 4; ++j) CHECK(u.at(0, 0, 0, j) == doctest::Approx(want[j]).epsilon(1e-14));

  // Interpolation of a bounded table stays bounded.
  Tensor b = bound_offsets(random_tensor(Shape{1, 2, 4, 4}, 302, -3, 3), nullptr);
  for (double v : upsample_offsets(b, 3, nullptr).values()) {
    CHECK(v > -1.0);
    CHECK(v < 1.0);
  }

  Tensor bad(Shape{1, 3, 4, 4});
  CHECK_THROWS_AS(upsample_offsets(bad, 2, nullptr), ShapeError);
  CHECK_THROWS_AS(upsample_offsets(r, 0, nullptr), ConfigError);
}

TEST_CASE("upsample_offsets is differentiable back to the table") {
  Tensor lo = random_tensor(Shape{1, 2, 3, 3}, 311, -0.5, 0.5, true);
  auto f = [](const std::vector<Tensor>& in, Tape& t) {
    Tensor u = upsample_offsets(in[0], 3, &t);
    return sum(mul(u, u, &t), &t);
  };
  CHECK(grad_check(f, {lo}, 1e-5) < 1e-6);
}

TEST_CASE("igum_forward with zero raw offsets in nearest mode is plain upsampling") {
  Tensor logits = random_tensor(Shape{2, 5, 4, 4}, 321);
  Tensor raw(Shape{2, 2, 4, 4});
  IgumConfig cfg;
  cfg.factor = 4;
  cfg.mode = SampleMode::kNearest;
  Tensor y = igum_forward(logits, raw, cfg, nullptr);
  CHECK(max_abs_diff(y, nearest_upsample_ref(logits, 4)) == 0.0);
}

TEST_CASE("igum_forward shape contract and errors") {
  Tensor logits(Shape{1, 19, 6, 9});
  Tensor raw(Shape{1, 2, 6, 9});
  IgumConfig cfg;
  cfg.factor = 8;
  CHECK(igum_forward(logits, raw, cfg, nullptr).shape() == Shape{1, 19, 48, 72});

  Tensor rawbad(Shape{1, 2, 5, 9});
  CHECK_THROWS_AS(igum_forward(logits, rawbad, cfg, nullptr), ShapeError);
  IgumConfig badcfg;
  badcfg.factor = 0;
  CHECK_THROWS_AS(igum_forward(logits, raw, badcfg, nullptr), ConfigError);
}

TEST_CASE("offset prediction size is independent of class count") {
  // The trainable surface feeding the module is the raw offset tensor: 2*N*M
  // scalars whether the class map carries 2 or 19 channels.
  Tensor raw(Shape{1, 2, 6, 6});
  IgumConfig cfg;
  cfg.factor = 2;
  for (std::int64_t C : {2, 19}) {
    Tensor logits = random_tensor(Shape{1, C, 6, 6}, 330 + C);
    Tensor y = igum_forward(logits, raw, cfg, nullptr);
    CHECK(y.shape().c == C);
    CHECK(raw.numel() == 2 * 6 * 6);
  }
}

TEST_CASE("a uniform negative x offset moves the class boundary right") {
  // Two classes along a 1D strip: the left half prefers class 0, the right
  // half class 1. Negative x displacement makes every output pixel sample
  // further left, so the region decided as class 0 grows.
  Tensor logits = Tensor::from_vector(Shape{1, 2, 1, 4},
                                      {0.8, 0.8, 0.2, 0.2, 0.2, 0.2, 0.8, 0.8});
  IgumConfig cfg;
  cfg.factor = 4;
  cfg.mode = SampleMode::kBilinear;
  auto transition = [&](double raw_dx) {
    Tensor raw(Shape{1, 2, 1, 4});
    for (int j = 0; j < 4; ++j) raw.at(0, 0, 0, j) = raw_dx;
    Tensor y = igum_forward(logits, raw, cfg, nullptr);
    for (int j = 0; j < 16; ++j) {
      if (y.at(0, 1, 0, j) > y.at(0, 0, 0, j)) return j;
    }
    return 16;
  };
  const int at_zero = transition(0.0);
  const int at_neg = transition(-0.3);
  CHECK(at_zero == 8);
  CHECK(at_neg > at_zero);
}

TEST_CASE("argmax is stable under positive logit scaling") {
  Tensor logits = random_tensor(Shape{1, 6, 5, 5}, 341, -2, 2);
  Tensor raw = random_tensor(Shape{1, 2, 5, 5}, 342, -0.4, 0.4);
  IgumConfig cfg;
  cfg.factor = 3;
  auto argmax_map = [&](double lambda) {
    Tensor scaled = logits.clone();
    for (double& v : scaled.values()) v *= lambda;
    Tensor y = igum_forward(scaled, raw, cfg, nullptr);
    const auto& s = y.shape();
    std::vector<int> am(static_cast<std::size_t>(s.h * s.w));
    for (std::int64_t p = 0; p < s.h * s.w; ++p) {
      int best = 0;
      for (std::int64_t c = 1; c < s.c; ++c) {
        if (y.data()[c * s.h * s.w + p] > y.data()[best * s.h * s.w + p]) {
          best = static_cast<int>(c);
        }
      }
      am[static_cast<std::size_t>(p)] = best;
    }
    return am;
  };
  const auto base = argmax_map(1.0);
  CHECK(argmax_map(0.5) == base);
  CHECK(argmax_map(3.0) == base);
}

TEST_CASE("igum gradients: bilinear reaches offsets, nearest does not") {
  Tensor logits = random_tensor(Shape{1, 3, 4, 4}, 351, -1, 1, true);
  Tensor raw = random_tensor(Shape{1, 2, 4, 4}, 352, 0.03, 0.08, true);
  IgumConfig cfg;
  cfg.factor = 2;

  auto f = [cfg](const std::vector<Tensor>& in, Tape& t) {
    Tensor y = igum_forward(in[0], in[1], cfg, &t);
    return sum(mul(y, y, &t), &t);
  };
  CHECK(grad_check(f, {logits, raw}, 1e-5) < 1e-4);

  IgumConfig ncfg = cfg;
  ncfg.mode = SampleMode::kNearest;
  Tensor logits2 = random_tensor(Shape{1, 3, 4, 4}, 353, -1, 1, true);
  Tensor raw2 = random_tensor(Shape{1, 2, 4, 4}, 354, 0.03, 0.08, true);
  Tape tape;
  Tensor loss = sum(igum_forward(logits2, raw2, ncfg, &tape), &tape);
  backward(loss, tape);
  CHECK(logits2.has_grad());
  CHECK_FALSE(raw2.has_grad());
}

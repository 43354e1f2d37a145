#include "wseg/gradcheck_suite.hpp"

#include <cmath>

#include "wseg/igum.hpp"
#include "wseg/instance.hpp"
#include "wseg/net.hpp"
#include "wseg/sampler.hpp"
#include "wseg/tensor.hpp"
#include "wseg/util.hpp"

namespace wseg {

namespace {

constexpr double kEps = 1e-5;
constexpr double kThreshold = 1e-4;

Tensor random_tensor(Shape s, double lo, double hi, Rng& rng, bool requires_grad) {
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  t.set_requires_grad(requires_grad);
  return t;
}

double check_guided_sample_bilinear() {
  Rng rng(11);
  Tensor u = random_tensor({1, 3, 5, 5}, -1.0, 1.0, rng, true);
  Tensor off = random_tensor({1, 2, 5, 5}, -0.23, 0.23, rng, true);
  const SampleGrid grid = regular_grid(5, 5, 1);
  return grad_check(
      [grid](const std::vector<Tensor>& in, Tape& tape) {
        return sum(guided_sample(in[0], grid, in[1], SampleMode::kBilinear, &tape), &tape);
      },
      {u, off}, kEps);
}

double check_upsample_offsets() {
  Rng rng(12);
  Tensor low = random_tensor({1, 2, 4, 4}, -0.8, 0.8, rng, true);
  return grad_check(
      [](const std::vector<Tensor>& in, Tape& tape) {
        return sum(upsample_offsets(in[0], 2, &tape), &tape);
      },
      {low}, kEps);
}

double check_bound_offsets() {
  Rng rng(13);
  Tensor raw = random_tensor({1, 2, 4, 4}, -2.0, 2.0, rng, true);
  return grad_check(
      [](const std::vector<Tensor>& in, Tape& tape) {
        return sum(bound_offsets(in[0], &tape), &tape);
      },
      {raw}, kEps);
}

double check_diffuse() {
  Rng rng(14);
  Tensor off = random_tensor({1, 2, 6, 6}, -0.21, 0.21, rng, true);
  return grad_check(
      [](const std::vector<Tensor>& in, Tape& tape) {
        return sum(diffuse(in[0], 2, SampleMode::kBilinear, &tape), &tape);
      },
      {off}, kEps);
}

// Residuals land in (0.15, 0.6) componentwise: away from the L1 kink at zero
// and the Huber transition at one.
double check_instance_loss(InstanceLossKind kind) {
  Rng rng(15);
  LabelMap instances(1, 6, 6);
  for (std::int64_t y = 1; y <= 3; ++y) {
    for (std::int64_t x = 2; x <= 4; ++x) instances.at(0, y, x) = 1;
  }
  for (std::int64_t y = 4; y <= 5; ++y) instances.at(0, y, 0) = 2;
  const CentroidTargets targets = centroid_targets(instances);
  Tensor pred = targets.coords.clone();
  for (double& v : pred.values()) {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    v += sign * rng.uniform(0.15, 0.6);
  }
  pred.set_requires_grad(true);
  return grad_check(
      [targets, kind](const std::vector<Tensor>& in, Tape& tape) {
        return instance_loss(in[0], targets, kind, &tape);
      },
      {pred}, kEps);
}

double check_lightweight_block() {
  Rng rng(mix_seed(16, 0xb10c));
  LightweightNonBt1DConfig cfg;
  cfg.channels = 4;
  cfg.dilation = 2;
  cfg.dropout_p = 0.0;
  cfg.tail_1x1 = false;
  layers::LightweightBlock block;
  block.init(cfg, 0, rng);
  Tensor x = random_tensor({1, 4, 6, 6}, -1.0, 1.0, rng, true);

  std::vector<Tensor> inputs = {x,
                                block.conv_in.weight,
                                block.conv_ver.weight,
                                block.conv_hor.weight,
                                block.conv_out.weight,
                                block.bn_in.gamma,
                                block.bn_in.beta,
                                block.act0.slopes,
                                block.act_final.slopes};
  // The program ignores the passed list: every entry aliases the storage the
  // captured block and input read, so perturbations land where they should.
  return grad_check(
      [block, x](const std::vector<Tensor>&, Tape& tape) mutable {
        return sum(block.forward(x, Mode::kEval, &tape, 0), &tape);
      },
      inputs, kEps);
}

double check_network_loss() {
  EncoderConfig cfg;
  cfg.stage_channels = {4, 8};
  cfg.stage_modules = {0, 1};
  cfg.stage_dilations = {{}, {1}};
  cfg.classes = 3;
  cfg.factor = 4;
  cfg.dropout_first = 0.0;
  cfg.dropout_rest = 0.0;
  Network net(cfg, 3);
  // The offset heads initialize to zero, which parks every sample on a
  // bilinear lattice kink. Bias nudges move the check to a smooth point.
  for (NamedTensor& p : net.parameters()) {
    if (p.name == "head_sem_offsets.bias") {
      p.value.data()[0] = 0.0731;
      p.value.data()[1] = -0.0577;
    } else if (p.name == "head_inst_offsets.bias") {
      p.value.data()[0] = -0.0613;
      p.value.data()[1] = 0.0447;
    }
  }

  Rng rng(17);
  Tensor image = random_tensor({1, 3, 16, 16}, 0.0, 1.0, rng, false);
  LabelMap sem(1, 16, 16);
  LabelMap inst(1, 16, 16);
  for (std::int64_t y = 4; y <= 9; ++y) {
    for (std::int64_t x = 5; x <= 10; ++x) {
      sem.at(0, y, x) = 1;
      inst.at(0, y, x) = 1;
    }
  }
  const CentroidTargets targets = centroid_targets(inst);
  const IgumConfig up{cfg.factor, SampleMode::kBilinear};

  std::vector<Tensor> inputs;
  for (NamedTensor& p : net.parameters()) inputs.push_back(p.value);
  return grad_check_sampled(
      [&net, image, sem, targets, up](const std::vector<Tensor>&, Tape& tape) {
        NetworkOutput out = net.forward(image, Mode::kEval, &tape);
        Tensor logits_hi = igum_forward(out.logits, out.sem_offsets, up, &tape);
        Tensor total = softmax_cross_entropy(logits_hi, sem, &tape);
        Tensor bounded = bound_offsets(out.inst_offsets, &tape);
        Tensor coords = diffuse(bounded, 2, SampleMode::kBilinear, &tape);
        Tensor coords_hi = upsample_instance_output(coords, out.inst_offsets, up, &tape);
        Tensor iloss = instance_loss(coords_hi, targets, InstanceLossKind::kL2, &tape);
        return add_scaled(total, iloss, 1.0, &tape);
      },
      inputs, kEps, 8, 29);
}

}  // namespace

std::vector<GradCheckRow> run_gradcheck_suite(const std::string& only) {
  struct Case {
    const char* name;
    double (*fn)();
  };
  static const Case cases[] = {
      {"guided_sample_bilinear", &check_guided_sample_bilinear},
      {"upsample_offsets", &check_upsample_offsets},
      {"bound_offsets", &check_bound_offsets},
      {"diffuse", &check_diffuse},
      {"instance_loss_l2", []() { return check_instance_loss(InstanceLossKind::kL2); }},
      {"instance_loss_l1", []() { return check_instance_loss(InstanceLossKind::kL1); }},
      {"instance_loss_smooth_l1",
       []() { return check_instance_loss(InstanceLossKind::kSmoothL1); }},
      {"lightweight_block", &check_lightweight_block},
      {"network_loss", &check_network_loss},
  };

  std::vector<GradCheckRow> rows;
  bool matched = false;
  for (const Case& c : cases) {
    if (!only.empty() && only != c.name) continue;
    matched = true;
    GradCheckRow row;
    row.name = c.name;
    row.threshold = kThreshold;
    row.max_rel_err = c.fn();
    row.pass = row.max_rel_err < row.threshold;
    rows.push_back(std::move(row));
  }
  if (!only.empty() && !matched) throw ConfigError("unknown gradcheck op '" + only + "'");
  return rows;
}

}  // namespace wseg

#pragma once

// Training engine: Adam with a polynomial learning-rate schedule over the
// joint objective cross-entropy + lambda * instance regression, plus the
// matching evaluation pipeline (guided upsampling, coordinate diffusion,
// instance extraction, metrics).

#include <cstdint>
#include <string>
#include <vector>

#include "wseg/data.hpp"
#include "wseg/instance.hpp"
#include "wseg/metrics.hpp"
#include "wseg/net.hpp"

namespace wseg {

struct TrainConfig {
  double lr0 = 5e-4;
  double weight_decay = 1e-4;
  int epochs = 40;
  int batch = 8;
  double poly_power = 0.9;
  std::uint64_t seed = 0;
  int t_iterations = 30;
  InstanceLossKind loss_kind = InstanceLossKind::kL2;
  double lambda_instance = 1.0;
};

void validate_train_config(const TrainConfig& cfg);

// lr0 * (1 - epoch/epochs)^poly_power, defined on 0 <= epoch <= epochs.
double poly_lr(int epoch, const TrainConfig& cfg);

// key=value lines, one per key; '#' starts a comment; unknown or duplicate
// keys are rejected. loss_kind takes l2 | l1 | smooth_l1.
TrainConfig parse_train_config(const std::string& path);
std::string loss_kind_name(InstanceLossKind kind);

// Classic Adam with the L2 penalty added to the gradient. Moments are kept
// per parameter in list order; a parameter without an allocated gradient
// contributes only its decay term.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;
};

struct AdamOpts {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void adam_step(std::vector<NamedTensor>& params, AdamState& state, double lr,
               double weight_decay, const AdamOpts& opts = {});

struct EvalOptions {
  int t = 30;
  int batch = 8;
  int area_threshold = 64;
  bool ablate_offsets = false;  // zero all guidance offsets (plain upsampling)
};

struct EvalScores {
  SegScores seg;
  SegScores boundary;  // scores over pixels within 2 px of a label boundary
  ApResult ap;
};

EvalScores evaluate_network(Network& net, const Dataset& ds, const EvalOptions& opts);
EvalScores evaluate_checkpoint(const std::string& ckpt_path, const Dataset& ds, bool fold_bn,
                               const EvalOptions& opts);

struct TrainExtras {
  bool ablate_offsets = false;
  double early_stop_miou = 2.0;  // unreachable by default: run all epochs
  int area_threshold = 64;
  // Epochs trained with plain upsampling before guidance unlocks. Offsets
  // that learn against an untrained encoder chase noise into tanh
  // saturation and never recover; a competent encoder hands them a
  // boundary-refinement gradient instead. -1 resolves to epochs/8.
  int offset_warmup_epochs = -1;
  // The offset heads step with their own Adam state at lr scaled by a
  // factor that ramps offset_lr_scale -> 1 across the half of the
  // schedule that follows warm-up. Full-rate Adam walks the zero-init
  // heads to tanh saturation within one epoch because its per-parameter
  // normalization ignores gradient magnitude; the ramp keeps early offsets
  // inside the linear region while guidance develops.
  double offset_lr_scale = 0.1;
};

struct TrainRun {
  double best_miou = 0.0;
  int best_epoch = -1;
  int epochs_run = 0;
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

// Runs seeded-shuffle minibatch epochs, logs one validation row per epoch to
// csv_path, and keeps the best-mIoU checkpoint at ckpt_path. A non-finite
// loss aborts with a diagnostic naming the epoch and step.
TrainRun train(const TrainConfig& cfg, const EncoderConfig& netcfg, const Dataset& train_ds,
               const Dataset& val_ds, const std::string& ckpt_path, const std::string& csv_path,
               const TrainExtras& extras = {});

}  // namespace wseg

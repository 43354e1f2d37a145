#include "wseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "wseg/checkpoint.hpp"
#include "wseg/igum.hpp"
#include "wseg/util.hpp"

namespace wseg {

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.lr0 <= 0.0) throw ConfigError("lr0 must be positive");
  if (cfg.poly_power <= 0.0 || cfg.poly_power > 1.0) {
    throw ConfigError("poly_power must lie in (0, 1]");
  }
  if (cfg.batch < 1) throw ConfigError("batch must be >= 1");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (cfg.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (cfg.t_iterations < 0) throw ConfigError("t_iterations must be >= 0");
  if (cfg.lambda_instance < 0.0) throw ConfigError("lambda_instance must be >= 0");
}

double poly_lr(int epoch, const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (epoch < 0 || epoch > cfg.epochs) {
    throw ConfigError("epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(cfg.epochs) + "]");
  }
  const double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return cfg.lr0 * std::pow(frac, cfg.poly_power);
}

std::string loss_kind_name(InstanceLossKind kind) {
  switch (kind) {
    case InstanceLossKind::kL2: return "l2";
    case InstanceLossKind::kL1: return "l1";
    case InstanceLossKind::kSmoothL1: return "smooth_l1";
  }
  return "l2";
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("bad numeric value for " + key + ": '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("bad numeric value for " + key + ": '" + v + "'");
  return out;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::int64_t out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("bad integer value for " + key + ": '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("bad integer value for " + key + ": '" + v + "'");
  return out;
}

}  // namespace

TrainConfig parse_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open config file " + path);
  TrainConfig cfg;
  std::map<std::string, bool> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const std::size_t eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + " is not key=value: '" + body + "'");
    }
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("line " + std::to_string(lineno) + " is not key=value: '" + body + "'");
    }
    if (seen[key]) throw ConfigError("duplicate key '" + key + "'");
    seen[key] = true;

    if (key == "lr0") {
      cfg.lr0 = parse_double(key, value);
    } else if (key == "weight_decay") {
      cfg.weight_decay = parse_double(key, value);
    } else if (key == "epochs") {
      cfg.epochs = static_cast<int>(parse_int(key, value));
    } else if (key == "batch") {
      cfg.batch = static_cast<int>(parse_int(key, value));
    } else if (key == "poly_power") {
      cfg.poly_power = parse_double(key, value);
    } else if (key == "seed") {
      cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
    } else if (key == "t_iterations") {
      cfg.t_iterations = static_cast<int>(parse_int(key, value));
    } else if (key == "lambda_instance") {
      cfg.lambda_instance = parse_double(key, value);
    } else if (key == "loss_kind") {
      if (value == "l2") {
        cfg.loss_kind = InstanceLossKind::kL2;
      } else if (value == "l1") {
        cfg.loss_kind = InstanceLossKind::kL1;
      } else if (value == "smooth_l1") {
        cfg.loss_kind = InstanceLossKind::kSmoothL1;
      } else {
        throw ConfigError("loss_kind must be l2, l1, or smooth_l1, got '" + value + "'");
      }
    } else {
      throw ConfigError("unknown key '" + key + "'");
    }
  }
  validate_train_config(cfg);
  return cfg;
}

void adam_step(std::vector<NamedTensor>& params, AdamState& state, double lr,
               double weight_decay, const AdamOpts& opts) {
  if (state.step == 0 && state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(static_cast<std::size_t>(params[i].value.numel()), 0.0);
      state.v[i].assign(static_cast<std::size_t>(params[i].value.numel()), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("optimizer state tracks " + std::to_string(state.m.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].value;
    const std::size_t n = static_cast<std::size_t>(p.numel());
    if (state.m[i].size() != n) {
      throw ShapeError("optimizer state shape mismatch for " + params[i].name);
    }
    const double* g = p.has_grad() ? p.grad() : nullptr;
    double* pv = p.data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    for (std::size_t k = 0; k < n; ++k) {
      const double gk = (g ? g[k] : 0.0) + weight_decay * pv[k];
      m[k] = opts.beta1 * m[k] + (1.0 - opts.beta1) * gk;
      v[k] = opts.beta2 * v[k] + (1.0 - opts.beta2) * gk * gk;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      pv[k] -= lr * mhat / (std::sqrt(vhat) + opts.eps);
    }
  }
}

namespace {

LabelMap argmax_channels(const Tensor& x) {
  const Shape& s = x.shape();
  LabelMap out(s.b, s.h, s.w);
  const std::int64_t plane = s.h * s.w;
  for (std::int64_t b = 0; b < s.b; ++b) {
    for (std::int64_t i = 0; i < plane; ++i) {
      double best = x.data()[(b * s.c) * plane + i];
      std::int32_t arg = 0;
      for (std::int64_t c = 1; c < s.c; ++c) {
        const double v = x.data()[(b * s.c + c) * plane + i];
        if (v > best) {
          best = v;
          arg = static_cast<std::int32_t>(c);
        }
      }
      out.v[static_cast<std::size_t>(b * plane + i)] = arg;
    }
  }
  return out;
}

// Overwrites the coordinates of pixels outside the predicted thing mask with
// their own grid position so they stay single-pixel groups at extraction.
void reset_background_coords(Tensor& coords, const LabelMap& pred_sem,
                             const std::vector<int>& thing_classes) {
  const Shape& s = coords.shape();
  const SampleGrid grid = regular_grid(s.h, s.w, 1);
  const std::int64_t plane = s.h * s.w;
  for (std::int64_t b = 0; b < s.b; ++b) {
    for (std::int64_t i = 0; i < plane; ++i) {
      const std::int32_t cls = pred_sem.v[static_cast<std::size_t>(b * plane + i)];
      if (std::find(thing_classes.begin(), thing_classes.end(), cls) != thing_classes.end()) {
        continue;
      }
      coords.data()[(b * 2 + 0) * plane + i] = grid.coords.data()[i];
      coords.data()[(b * 2 + 1) * plane + i] = grid.coords.data()[plane + i];
    }
  }
}

std::vector<std::vector<int>> batch_chunks(std::size_t count, int batch) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur;
  for (std::size_t i = 0; i < count; ++i) {
    cur.push_back(static_cast<int>(i));
    if (static_cast<int>(cur.size()) == batch) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

EvalScores evaluate_network(Network& net, const Dataset& ds, const EvalOptions& opts) {
  if (ds.samples.empty()) throw UsageError("cannot evaluate on an empty dataset");
  if (opts.batch < 1) throw ConfigError("evaluation batch must be >= 1");
  if (opts.t < 0) throw ConfigError("diffusion step count must be >= 0");
  if (net.config().classes != ds.classes) {
    throw ConfigError("network predicts " + std::to_string(net.config().classes) +
                      " classes but the dataset has " + std::to_string(ds.classes));
  }
  const int factor = net.config().factor;
  const IgumConfig up{factor, SampleMode::kNearest};

  ConfusionMatrix conf(ds.classes);
  ConfusionMatrix conf_boundary(ds.classes);
  InstanceApAccumulator ap_acc;
  for (const std::vector<int>& idx : batch_chunks(ds.samples.size(), opts.batch)) {
    const Tensor images = stack_images(ds, idx);
    const NetworkOutput out = net.forward(images, Mode::kEval, nullptr);

    const Shape ls = out.logits.shape();
    const Tensor sem_raw =
        opts.ablate_offsets ? zeros({ls.b, 2, ls.h, ls.w}) : out.sem_offsets;
    const Tensor inst_raw =
        opts.ablate_offsets ? zeros({ls.b, 2, ls.h, ls.w}) : out.inst_offsets;

    const Tensor up_logits = igum_forward(out.logits, sem_raw, up, nullptr);
    const LabelMap pred_sem = argmax_channels(up_logits);
    const LabelMap gt_sem = stack_semantic(ds, idx);
    conf.add(gt_sem, pred_sem);
    conf_boundary.add_masked(gt_sem, pred_sem, boundary_band(gt_sem, 2));

    const Tensor bounded = bound_offsets(inst_raw, nullptr);
    const Tensor coord_lo = diffuse(bounded, opts.t, SampleMode::kNearest, nullptr);
    Tensor coord_hi = upsample_instance_output(coord_lo, inst_raw, up, nullptr);
    reset_background_coords(coord_hi, pred_sem, ds.thing_classes);
    const InstanceLabeling lab = extract_instances(coord_hi, opts.area_threshold);
    ap_acc.add(lab.ids, area_confidences(lab), stack_instance(ds, idx));
  }

  EvalScores scores;
  scores.seg = miou(conf);
  scores.boundary = conf_boundary.total() > 0 ? miou(conf_boundary) : SegScores{};
  scores.ap = ap_acc.result();
  return scores;
}

EvalScores evaluate_checkpoint(const std::string& ckpt_path, const Dataset& ds, bool fold_bn,
                               const EvalOptions& opts) {
  Network net = load_checkpoint(ckpt_path);
  if (fold_bn) {
    Network folded = fold_batchnorm(net);
    return evaluate_network(folded, ds, opts);
  }
  return evaluate_network(net, ds, opts);
}

TrainRun train(const TrainConfig& cfg, const EncoderConfig& netcfg, const Dataset& train_ds,
               const Dataset& val_ds, const std::string& ckpt_path, const std::string& csv_path,
               const TrainExtras& extras) {
  validate_train_config(cfg);
  if (train_ds.samples.empty()) throw UsageError("training set is empty");
  if (val_ds.samples.empty()) throw UsageError("validation set is empty");
  if (netcfg.classes != train_ds.classes || val_ds.classes != train_ds.classes) {
    throw ConfigError("network, training set, and validation set disagree on class count");
  }

  Network net(netcfg, cfg.seed);
  std::vector<NamedTensor> params = net.parameters();
  std::vector<NamedTensor> trunk_params, offset_params;
  for (const NamedTensor& p : params) {
    const bool head = p.name.rfind("head_sem_offsets", 0) == 0 ||
                      p.name.rfind("head_inst_offsets", 0) == 0;
    (head ? offset_params : trunk_params).push_back(p);
  }
  AdamState adam_trunk, adam_offsets;
  MetricsCsv csv(csv_path);
  const IgumConfig up_train{netcfg.factor, SampleMode::kBilinear};
  const EvalOptions val_opts{cfg.t_iterations, cfg.batch, extras.area_threshold,
                             extras.ablate_offsets};

  std::vector<int> order(train_ds.samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(mix_seed(cfg.seed, 0x73687566));
  const int warmup =
      extras.offset_warmup_epochs < 0 ? cfg.epochs / 8 : extras.offset_warmup_epochs;
  const int ramp_end = warmup + std::max(1, (cfg.epochs - warmup) / 2);

  TrainRun run;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = poly_lr(epoch, cfg);
    const bool use_offsets = !extras.ablate_offsets && epoch >= warmup;
    const double ramp =
        std::min(1.0, static_cast<double>(epoch - warmup) / (ramp_end - warmup));
    const double offset_lr =
        lr * (extras.offset_lr_scale + (1.0 - extras.offset_lr_scale) * std::max(0.0, ramp));
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    int steps = 0;
    std::vector<int> batch;
    for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch) {
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                   order.begin() +
                       static_cast<std::ptrdiff_t>(std::min(pos + cfg.batch, order.size())));
      const Tensor images = stack_images(train_ds, batch);
      const LabelMap sem_gt = stack_semantic(train_ds, batch);
      const LabelMap inst_gt = stack_instance(train_ds, batch);

      Tape tape;
      const std::uint64_t drop_seed = mix_seed(cfg.seed, 0x64726f70,
                                               static_cast<std::uint64_t>(epoch) * 1000003 +
                                                   static_cast<std::uint64_t>(steps));
      const NetworkOutput out = net.forward(images, Mode::kTrain, &tape, drop_seed);

      const Shape ls = out.logits.shape();
      const Tensor sem_raw =
          use_offsets ? out.sem_offsets : zeros({ls.b, 2, ls.h, ls.w});
      const Tensor up_logits = igum_forward(out.logits, sem_raw, up_train, &tape);
      Tensor total = softmax_cross_entropy(up_logits, sem_gt, &tape);

      if (use_offsets && cfg.lambda_instance > 0.0) {
        const Tensor bounded = bound_offsets(out.inst_offsets, &tape);
        const Tensor coord_lo =
            diffuse(bounded, cfg.t_iterations, SampleMode::kBilinear, &tape);
        const Tensor coord_hi =
            upsample_instance_output(coord_lo, out.inst_offsets, up_train, &tape);
        const Tensor iloss =
            instance_loss(coord_hi, centroid_targets(inst_gt), cfg.loss_kind, &tape);
        total = add_scaled(total, iloss, cfg.lambda_instance, &tape);
      }

      const double loss_value = total.data()[0];
      if (!std::isfinite(loss_value)) {
        throw std::runtime_error("training diverged: loss " + std::to_string(loss_value) +
                                 " at epoch " + std::to_string(epoch) + " step " +
                                 std::to_string(steps));
      }
      loss_sum += loss_value;
      ++steps;

      backward(total, tape);
      adam_step(trunk_params, adam_trunk, lr, cfg.weight_decay);
      if (use_offsets) adam_step(offset_params, adam_offsets, offset_lr, cfg.weight_decay);
      for (NamedTensor& p : params) p.value.zero_grad();
    }
    run.epoch_loss.push_back(loss_sum / std::max(steps, 1));
    run.epochs_run = epoch + 1;

    const EvalScores val = evaluate_network(net, val_ds, val_opts);
    csv.append(epoch, "val", val.seg, val.ap);
    if (val.seg.miou > run.best_miou || run.best_epoch < 0) {
      run.best_miou = val.seg.miou;
      run.best_epoch = epoch;
      save_checkpoint(ckpt_path, net);
    }
    if (run.best_miou >= extras.early_stop_miou) break;
  }
  return run;
}

}  // namespace wseg

// Command-line front end: dataset synthesis, training, evaluation, gradient
// checks, and micro benchmarks. Every output is CSV with a header row, to
// stdout unless a file is requested.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wseg/bench.hpp"
#include "wseg/checkpoint.hpp"
#include "wseg/data.hpp"
#include "wseg/gradcheck_suite.hpp"
#include "wseg/train.hpp"

namespace {

using namespace wseg;

void parse_size(const std::string& text, std::int64_t& h, std::int64_t& w) {
  const std::size_t x = text.find('x');
  if (x == std::string::npos || x == 0 || x + 1 == text.size()) {
    throw ConfigError("size must be HxW, got '" + text + "'");
  }
  try {
    h = std::stoll(text.substr(0, x));
    w = std::stoll(text.substr(x + 1));
  } catch (const std::exception&) {
    throw ConfigError("size must be HxW, got '" + text + "'");
  }
  if (h < 1 || w < 1) throw ConfigError("size must be positive, got '" + text + "'");
}

// Routes a CSV payload to stdout or to the requested file.
void emit(const std::string& csv, const std::string& out_path) {
  if (out_path.empty()) {
    std::fputs(csv.c_str(), stdout);
    return;
  }
  std::ofstream f(out_path, std::ios::trunc);
  if (!f) throw FormatError("cannot open " + out_path + " for writing");
  f << csv;
}

std::string format_eval_row(int t, const EvalScores& s) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,eval,%.6f,%.6f,%.6f,%.6f,%.6f\n", t, s.seg.miou,
                s.seg.class_avg, s.seg.global_avg, s.ap.ap, s.ap.ap50);
  return buf;
}

int run(int argc, char** argv) {
  CLI::App app{"Guided-upsampling segmentation toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset directory");
  std::uint64_t synth_seed = 0;
  int synth_count = 0;
  std::string synth_size = "64x64";
  std::string synth_out;
  int synth_max_shapes = 4;
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--count", synth_count, "Number of samples")->required();
  synth->add_option("--size", synth_size, "Image size HxW");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--max-shapes", synth_max_shapes, "Maximum shapes per scene");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train on DIR/train, validate on DIR/val");
  std::string train_config, train_data, train_ckpt, train_metrics;
  train_cmd->add_option("--config", train_config, "key=value training config")->required();
  train_cmd->add_option("--data", train_data, "Dataset root with train/ and val/")->required();
  train_cmd->add_option("--out", train_ckpt, "Checkpoint path (best validation mIoU)")
      ->required();
  train_cmd->add_option("--metrics", train_metrics, "Metrics CSV path (default stdout)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data, eval_out;
  std::vector<int> eval_ts;
  bool fold_bn = false;
  int eval_batch = 8;
  int eval_area = 64;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset directory")->required();
  eval_cmd->add_option("--t", eval_ts, "Diffusion steps; repeat for a sweep");
  eval_cmd->add_flag("--fold-bn", fold_bn, "Fold batch normalization before evaluating");
  eval_cmd->add_option("--batch", eval_batch, "Evaluation batch size");
  eval_cmd->add_option("--area-threshold", eval_area, "Minimum instance area in pixels");
  eval_cmd->add_option("--out", eval_out, "CSV path (default stdout)");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "Run the gradient-check battery");
  std::string grad_op, grad_out;
  grad_cmd->add_option("--op", grad_op, "Check only the named operation");
  grad_cmd->add_option("--out", grad_out, "CSV path (default stdout)");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Time one scenario and report the median");
  std::string bench_scenario, bench_size = "96x96", bench_out;
  int bench_channels = 19;
  int bench_reps = 50;
  bench_cmd->add_option("--scenario", bench_scenario, "One of the bench scenarios")->required();
  bench_cmd->add_option("--channels", bench_channels, "Class-map channels");
  bench_cmd->add_option("--size", bench_size, "Full-resolution size HxW");
  bench_cmd->add_option("--reps", bench_reps, "Timed repetitions (>= 10)");
  bench_cmd->add_option("--out", bench_out, "CSV path (default stdout)");

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) {
    std::int64_t h = 0, w = 0;
    parse_size(synth_size, h, w);
    const Dataset ds = synth_generate(synth_seed, synth_count, h, w, synth_max_shapes);
    save_dataset(synth_out, ds);
    std::printf("dir,count,size,seed\n%s,%d,%s,%llu\n", synth_out.c_str(), synth_count,
                synth_size.c_str(), static_cast<unsigned long long>(synth_seed));
    return 0;
  }

  if (train_cmd->parsed()) {
    const TrainConfig cfg = parse_train_config(train_config);
    namespace fs = std::filesystem;
    const fs::path root(train_data);
    if (!fs::exists(root / "train") || !fs::exists(root / "val")) {
      throw UsageError("data root " + train_data + " must contain train/ and val/");
    }
    const Dataset tr = load_dataset((root / "train").string());
    const Dataset val = load_dataset((root / "val").string());
    EncoderConfig netcfg;
    netcfg.classes = tr.classes;
    const bool to_stdout = train_metrics.empty();
    const std::string csv_path =
        to_stdout ? (fs::temp_directory_path() / "warpseg_train_metrics.csv").string()
                  : train_metrics;
    const TrainRun run = train(cfg, netcfg, tr, val, train_ckpt, csv_path);
    if (to_stdout) {
      std::ifstream f(csv_path);
      std::cout << f.rdbuf();
      fs::remove(csv_path);
    }
    std::fprintf(stderr, "best mIoU %.6f at epoch %d after %d epochs\n", run.best_miou,
                 run.best_epoch, run.epochs_run);
    return 0;
  }

  if (eval_cmd->parsed()) {
    if (eval_ts.empty()) eval_ts.push_back(30);
    std::string csv = "t,split,miou,class_avg,global_avg,ap,ap50\n";
    const Dataset ds = load_dataset(eval_data);
    Network net = load_checkpoint(eval_ckpt);
    if (fold_bn) net = fold_batchnorm(net);
    for (int t : eval_ts) {
      const EvalScores s =
          evaluate_network(net, ds, EvalOptions{t, eval_batch, eval_area, false});
      csv += format_eval_row(t, s);
    }
    emit(csv, eval_out);
    return 0;
  }

  if (grad_cmd->parsed()) {
    const std::vector<GradCheckRow> rows = run_gradcheck_suite(grad_op);
    std::string csv = "op,max_rel_err,threshold,status\n";
    bool all_pass = true;
    for (const GradCheckRow& r : rows) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s,%.3e,%.3e,%s\n", r.name.c_str(), r.max_rel_err,
                    r.threshold, r.pass ? "pass" : "fail");
      csv += buf;
      all_pass = all_pass && r.pass;
    }
    emit(csv, grad_out);
    return all_pass ? 0 : 1;
  }

  if (bench_cmd->parsed()) {
    std::int64_t h = 0, w = 0;
    parse_size(bench_size, h, w);
    const BenchReport r = run_bench(bench_scenario, bench_channels, h, w, bench_reps);
    char buf[200];
    std::snprintf(buf, sizeof buf, "name,shape,reps,median_ms,fps\n%s,%s,%d,%.6f,%.3f\n",
                  r.name.c_str(), r.shape.c_str(), r.reps, r.median_ms, r.fps);
    emit(buf, bench_out);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

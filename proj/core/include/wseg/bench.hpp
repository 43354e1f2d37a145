#pragma once

// Single-threaded wall-clock micro benchmarks for the decoder comparison and
// the end-to-end pipeline. Median over timed repetitions after warm-up.

#include <cstdint>
#include <string>
#include <vector>

namespace wseg {

struct BenchReport {
  std::string name;
  std::string shape;  // "CxHxW" of the full-resolution output
  int reps = 0;
  double median_ms = 0.0;
  double fps = 0.0;  // 1000 / median_ms, single-image batches
};

// Scenarios, all on batch 1 with upsampling factor 8:
//   igum_decoder  guided upsampling of a (C, H/8, W/8) class map to (C, H, W)
//   dense_decoder two per-channel transposed convolutions (x2 then x4)
//   network       encoder forward pass on a (3, H, W) image, C classes
//   diffuse_step  one nearest-mode diffusion step on the (2, H/8, W/8) table
//   pipeline      network + guided upsampling + 30-step diffusion + extraction
// reps must be >= 10; 10 extra warm-up repetitions run untimed.
BenchReport run_bench(const std::string& scenario, int channels, std::int64_t h, std::int64_t w,
                      int reps);

std::vector<std::string> bench_scenarios();

}  // namespace wseg

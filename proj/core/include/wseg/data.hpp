#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wseg/tensor.hpp"

namespace wseg {

// Generator bookkeeping for one placed shape; cx/cy are the true center in
// pixel coordinates (pixel centroids of the rendered shape coincide with them).
struct InstanceMeta {
  int id = 0;
  int semantic_class = 0;
  double cx = 0.0;
  double cy = 0.0;
};

// One scene. Image values are quantized to the 8-bit grid at generation time
// so the PPM round trip is lossless. Instance ids are dense from 1.
struct Sample {
  Tensor image;       // (1, 3, H, W) in [0, 1]
  LabelMap semantic;  // (1, H, W)
  LabelMap instance;  // (1, H, W)
  std::vector<InstanceMeta> instances;  // not persisted by save_dataset
};

struct Dataset {
  std::vector<Sample> samples;
  int classes = 3;                      // 0 background, 1 rectangle, 2 circle
  std::vector<int> thing_classes{1, 2};
  std::uint64_t seed = 0;
};

// Scenes of axis-aligned rectangles and circles over a dark background, with
// at least 3 px between shapes. Deterministic per seed; placement that cannot
// be satisfied after bounded retries raises GenerationError.
Dataset synth_generate(std::uint64_t seed, int count, std::int64_t h, std::int64_t w,
                       int max_shapes);

// Binary PNM: P6 maxval 255 for images, P5 for labels (maxval 255 for
// semantic classes, 65535 big-endian for instance ids).
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);
void write_pgm(const std::string& path, const LabelMap& labels, int maxval);
LabelMap read_pgm(const std::string& path);

// Directory layout img_%05d.ppm / sem_%05d.pgm / inst_%05d.pgm plus meta.txt
// (count, classes, thing_classes, seed). Loading does not restore generator
// bookkeeping, only the rendered sample parts.
void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

// Minibatch assembly. All samples in a dataset share one resolution.
Tensor stack_images(const Dataset& ds, const std::vector<int>& indices);
LabelMap stack_semantic(const Dataset& ds, const std::vector<int>& indices);
LabelMap stack_instance(const Dataset& ds, const std::vector<int>& indices);

// Nearest-neighbor label reduction by an integer factor, sampling the center
// of each factor x factor cell.
LabelMap downsample_labels(const LabelMap& labels, int factor);

}  // namespace wseg

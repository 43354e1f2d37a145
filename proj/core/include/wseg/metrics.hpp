#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wseg/instance.hpp"
#include "wseg/tensor.hpp"

namespace wseg {

// Rows index ground truth, columns predictions.
struct ConfusionMatrix {
  int classes = 0;
  std::vector<std::int64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int c);
  void add(const LabelMap& gt, const LabelMap& pred);
  // Counts only pixels whose mask entry is nonzero.
  void add_masked(const LabelMap& gt, const LabelMap& pred, const LabelMap& mask);
  std::int64_t& at(int gt, int pred);
  std::int64_t at(int gt, int pred) const;
  std::int64_t total() const;
};

struct SegScores {
  double miou = 0.0;       // mean IoU over classes present in ground truth
  double class_avg = 0.0;  // mean class recall
  double global_avg = 0.0; // overall pixel accuracy
};

SegScores miou(const ConfusionMatrix& conf);

// 0/1 mask of pixels whose Chebyshev neighborhood of the given radius
// contains more than one label; scoring restricted to it weighs boundaries.
LabelMap boundary_band(const LabelMap& labels, int radius);

// Cityscapes-style average precision over IoU thresholds 0.50:0.05:0.95.
// ap50 is the 0.5-threshold value (0 if the threshold list omits 0.5).
struct ApResult {
  double ap = 0.0;
  double ap50 = 0.0;
};

std::vector<double> default_ap_thresholds();

// Accumulates instance detections across images. Matching is greedy within
// each image: detections in descending confidence take the unmatched ground
// truth instance of highest IoU at or above the threshold. AP of the globally
// ranked list is averaged over thresholds; with no ground truth anywhere the
// result is 0.
class InstanceApAccumulator {
 public:
  explicit InstanceApAccumulator(std::vector<double> thresholds = default_ap_thresholds());

  // confidence[b] holds one score per instance id (id i+1 at position i) of
  // batch element b.
  void add(const LabelMap& pred, const std::vector<std::vector<double>>& confidence,
           const LabelMap& gt);
  ApResult result() const;

 private:
  std::vector<double> thresholds_;
  struct Detection {
    double confidence;
    std::vector<bool> matched;  // per threshold
  };
  std::vector<Detection> detections_;
  std::int64_t total_gt_ = 0;
};

ApResult instance_ap(const InstanceLabeling& pred,
                     const std::vector<std::vector<double>>& confidence, const LabelMap& gt,
                     std::vector<double> thresholds = default_ap_thresholds());

// Detection confidence as instance area over the largest area in the image.
std::vector<std::vector<double>> area_confidences(const InstanceLabeling& labeling);

// Flat-kernel mean shift over the masked coordinate vectors, the O(T n^2)
// clustering reference. Modes closer than bandwidth / 2 merge into one label.
struct MeanShiftResult {
  InstanceLabeling labeling;
  std::int64_t kernel_evals = 0;
};

MeanShiftResult meanshift_oracle(const Tensor& coords, const Tensor& mask, double bandwidth,
                                 int max_iter);

// Appends rows under the header epoch,split,miou,class_avg,global_avg,ap,ap50
// with fixed six-digit formatting, so equal runs emit identical bytes.
class MetricsCsv {
 public:
  explicit MetricsCsv(const std::string& path);
  void append(int epoch, const std::string& split, const SegScores& seg, const ApResult& ap);

 private:
  std::string path_;
};

}  // namespace wseg

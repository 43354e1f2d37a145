#pragma once

// Instance segmentation by coordinate diffusion: every pixel carries a 2D
// coordinate, initially its own position on the regular grid. Repeated guided
// sampling with one shared offset table lets instance centers spread across
// their instances; pixels that end up holding the same coordinate belong to
// the same instance.

#include <cstdint>
#include <vector>

#include "wseg/igum.hpp"
#include "wseg/sampler.hpp"
#include "wseg/tensor.hpp"

namespace wseg {

// Ground-truth diffusion targets: per labeled pixel the normalized center of
// its instance (channel 0 = x, channel 1 = y) and a 0/1 mask of labeled
// pixels.
struct CentroidTargets {
  Tensor coords;  // (B, 2, H, W)
  Tensor mask;    // (B, 1, H, W)
};

// Dense instance labeling: 0 = background, ids 1..K per image ordered by
// decreasing pixel area. areas[b][id-1] holds the pixel count of id.
struct InstanceLabeling {
  LabelMap ids;
  std::vector<std::vector<std::int64_t>> areas;
};

enum class InstanceLossKind { kL2, kL1, kSmoothL1 };

// Per-instance center = mean of member pixel positions, in normalized
// coordinates, written to every member pixel. Instance ids in the input may
// be any positive integers; 0 is background. An empty labeling yields an
// all-zero mask.
CentroidTargets centroid_targets(const LabelMap& instances);

// Applies guided sampling t times over the identity grid, every step sharing
// the same offset table. Bilinear mode is differentiable and accumulates
// offset gradients across all steps; the initial grid is a constant.
Tensor diffuse(const Tensor& offsets, int t, SampleMode mode, Tape* tape);

// Mean over labeled pixels of the per-pixel distance between predicted and
// target coordinates. L2 uses the Euclidean norm of the 2D error, L1 the
// component-wise absolute sum, SmoothL1 the component-wise Huber penalty with
// beta = 1 in normalized units. An all-zero mask defines the loss as 0 with
// zero gradient.
Tensor instance_loss(const Tensor& pred, const CentroidTargets& targets, InstanceLossKind kind,
                     Tape* tape);

// Groups pixels by their coordinate value rounded to the integer pixel grid,
// drops groups smaller than area_threshold to background, and relabels the
// survivors densely by decreasing area (ties by raster order of the group
// position).
InstanceLabeling extract_instances(const Tensor& final_map, int area_threshold);

// Guided upsampling of a 2-channel coordinate map; bilinear while training,
// nearest at test time so upsampling never invents new coordinate values.
Tensor upsample_instance_output(const Tensor& lowres_map, const Tensor& lowres_offsets_raw,
                                const IgumConfig& cfg, Tape* tape);

}  // namespace wseg

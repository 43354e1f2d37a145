#pragma once

// Guided spatial sampling: a base coordinate grid plus a per-pixel guidance
// offset table select where in the source each output pixel reads from.
// Coordinates are normalized to [-1, 1] with -1/+1 at the centers of the
// first/last pixel (size-1 axes collapse to index 0). Offsets displace the
// base coordinates in the same normalized units; the sum is clamped to
// [-1, 1] before lookup, so out-of-range samples take the border value.

#include <cstdint>

#include "wseg/tensor.hpp"

namespace wseg {

// Base sampling coordinates, (1 or B, 2, H_out, W_out); channel 0 holds x,
// channel 1 holds y. A batch-1 grid broadcasts over the sampled batch.
struct SampleGrid {
  Tensor coords;
  int upsample_factor = 0;  // set when built by regular_grid, else 0
};

enum class SampleMode { kNearest, kBilinear };

// Grid of shape (1, 2, f*source_h, f*source_w) whose output pixel j along an
// axis of size S sits at source position (j + 0.5)/f - 0.5, normalized and
// clamped to [-1, 1]. Zero-offset nearest sampling over it reproduces
// nearest-neighbor upsampling by f; zero-offset bilinear sampling reproduces
// align-corners-false bilinear resizing.
SampleGrid regular_grid(std::int64_t source_h, std::int64_t source_w, int factor);

// Index-space position of normalized coordinate c on an axis of given size.
inline double denorm_coord(double c, std::int64_t size) {
  return (c + 1.0) * 0.5 * static_cast<double>(size - 1);
}

// Normalized coordinate of index-space position on an axis of given size.
inline double norm_coord(double index_pos, std::int64_t size) {
  if (size <= 1) return 0.0;
  const double c = 2.0 * index_pos / static_cast<double>(size - 1) - 1.0;
  return c < -1.0 ? -1.0 : (c > 1.0 ? 1.0 : c);
}

// Reads u at floor(denorm(coord + offset) + 0.5) per output pixel, one shared
// displacement for every channel. Gradients flow to u only; the rounded
// coordinate is piecewise constant in the offsets.
Tensor guided_sample_nearest(const Tensor& u, const SampleGrid& grid, const Tensor& offsets,
                             Tape* tape);

// Bilinear interpolation of u at the displaced coordinates. Differentiable in
// u and in the offsets; offset gradients vanish where the clamp is active.
Tensor guided_sample_bilinear(const Tensor& u, const SampleGrid& grid, const Tensor& offsets,
                              Tape* tape);

Tensor guided_sample(const Tensor& u, const SampleGrid& grid, const Tensor& offsets,
                     SampleMode mode, Tape* tape);

// tanh bounding of a raw 2-channel displacement prediction into (-1, 1).
Tensor bound_offsets(const Tensor& raw, Tape* tape);

}  // namespace wseg

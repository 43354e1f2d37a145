#pragma once

// Guided upsampling that replaces a decoder: the network predicts one
// 2-vector of sampling offsets per low-resolution pixel, the offset table is
// bilinearly interpolated to the output resolution, and the class map is
// guide-sampled over a fixed regular grid. The cost of the offset prediction
// is independent of the number of classes.

#include "wseg/sampler.hpp"
#include "wseg/tensor.hpp"

namespace wseg {

struct IgumConfig {
  int factor = 8;
  SampleMode mode = SampleMode::kBilinear;
  // Offset interpolation is always bilinear.
};

// Bilinearly interpolates a low-resolution offset table (B, 2, N, M) to
// (B, 2, f*N, f*M) over the regular grid. Differentiable back to the table;
// values stay inside (-1, 1) because interpolation is convex.
Tensor upsample_offsets(const Tensor& lowres, int factor, Tape* tape);

// bound_offsets -> upsample_offsets -> guided_sample of the logits over
// regular_grid(N, M, f). Fully differentiable in bilinear mode; nearest mode
// propagates gradients to the logits only.
Tensor igum_forward(const Tensor& logits, const Tensor& lowres_offsets_raw, const IgumConfig& cfg,
                    Tape* tape);

}  // namespace wseg

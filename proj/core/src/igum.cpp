#include "wseg/igum.hpp"

namespace wseg {

Tensor upsample_offsets(const Tensor& lowres, int factor, Tape* tape) {
  const Shape& s = lowres.shape();
  if (s.c != 2) {
    throw ShapeError("offset table needs exactly 2 channels, got " + s.str());
  }
  if (factor < 1) throw ConfigError("upsample factor must be >= 1");
  SampleGrid grid = regular_grid(s.h, s.w, factor);
  Tensor zero_off(Shape{s.b, 2, grid.coords.shape().h, grid.coords.shape().w});
  return guided_sample_bilinear(lowres, grid, zero_off, tape);
}

Tensor igum_forward(const Tensor& logits, const Tensor& lowres_offsets_raw, const IgumConfig& cfg,
                    Tape* tape) {
  const Shape& sl = logits.shape();
  const Shape& so = lowres_offsets_raw.shape();
  if (so.h != sl.h || so.w != sl.w || so.b != sl.b) {
    throw ShapeError("offset prediction " + so.str() + " does not match logits " + sl.str());
  }
  if (cfg.factor < 1) throw ConfigError("upsample factor must be >= 1");
  Tensor bounded = bound_offsets(lowres_offsets_raw, tape);
  Tensor offsets = upsample_offsets(bounded, cfg.factor, tape);
  SampleGrid grid = regular_grid(sl.h, sl.w, cfg.factor);
  return guided_sample(logits, grid, offsets, cfg.mode, tape);
}

}  // namespace wseg

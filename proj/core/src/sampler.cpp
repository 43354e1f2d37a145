#include "wseg/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

namespace wseg {

namespace {

// The normalize/denormalize round trip leaves integer positions off by a few
// ulp, which would turn exact copies into interpolations. Snap well below any
// meaningful displacement.
double snap_integer(double pos) {
  const double r = std::floor(pos + 0.5);
  return std::abs(pos - r) < 1e-9 ? r : pos;
}

// Offsets must cover the sampled batch; the grid may broadcast from batch 1.
void check_sampling_shapes(const Shape& u, const Shape& grid, const Shape& off) {
  if (grid.c != 2 || off.c != 2) {
    throw ShapeError("sampling grid and offsets need exactly 2 channels, got grid " + grid.str() +
                     ", offsets " + off.str());
  }
  if (grid.h != off.h || grid.w != off.w) {
    throw ShapeError("grid " + grid.str() + " and offsets " + off.str() +
                     " disagree on output size");
  }
  if (off.b != u.b) {
    throw ShapeError("offsets batch " + off.str() + " does not match input " + u.str());
  }
  if (grid.b != 1 && grid.b != u.b) {
    throw ShapeError("grid batch " + grid.str() + " must be 1 or match input " + u.str());
  }
}

}  // namespace

SampleGrid regular_grid(std::int64_t source_h, std::int64_t source_w, int factor) {
  if (source_h < 1 || source_w < 1 || factor < 1) {
    throw ConfigError("regular_grid arguments must be >= 1");
  }
  const std::int64_t oh = source_h * factor;
  const std::int64_t ow = source_w * factor;
  SampleGrid g;
  g.coords = Tensor(Shape{1, 2, oh, ow});
  g.upsample_factor = factor;
  double* xs = g.coords.data();           // channel 0
  double* ys = g.coords.data() + oh * ow;  // channel 1
  for (std::int64_t j = 0; j < ow; ++j) {
    const double src = (static_cast<double>(j) + 0.5) / factor - 0.5;
    const double c = norm_coord(src, source_w);
    for (std::int64_t i = 0; i < oh; ++i) xs[i * ow + j] = c;
  }
  for (std::int64_t i = 0; i < oh; ++i) {
    const double src = (static_cast<double>(i) + 0.5) / factor - 0.5;
    const double c = norm_coord(src, source_h);
    for (std::int64_t j = 0; j < ow; ++j) ys[i * ow + j] = c;
  }
  return g;
}

Tensor guided_sample_nearest(const Tensor& u, const SampleGrid& grid, const Tensor& offsets,
                             Tape* tape) {
  const Shape& su = u.shape();
  const Shape& sg = grid.coords.shape();
  const Shape& so = offsets.shape();
  check_sampling_shapes(su, sg, so);
  const std::int64_t oh = sg.h, ow = sg.w, opix = oh * ow;
  const std::int64_t plane = su.h * su.w;
  Tensor y(Shape{su.b, su.c, oh, ow});
  // Source pixel index per (b, output pixel); shared by every channel.
  auto src = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(su.b * opix));
  const double* gv = grid.coords.data();
  const double* ov = offsets.data();
  for (std::int64_t b = 0; b < su.b; ++b) {
    const std::int64_t gb = sg.b == 1 ? 0 : b;
    const double* gx = gv + (gb * 2 + 0) * opix;
    const double* gy = gv + (gb * 2 + 1) * opix;
    const double* px = ov + (b * 2 + 0) * opix;
    const double* py = ov + (b * 2 + 1) * opix;
    for (std::int64_t o = 0; o < opix; ++o) {
      const double xf = denorm_coord(std::clamp(gx[o] + px[o], -1.0, 1.0), su.w);
      const double yf = denorm_coord(std::clamp(gy[o] + py[o], -1.0, 1.0), su.h);
      const std::int64_t ix =
          std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(xf + 0.5)), 0, su.w - 1);
      const std::int64_t iy =
          std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(yf + 0.5)), 0, su.h - 1);
      (*src)[static_cast<std::size_t>(b * opix + o)] = iy * su.w + ix;
    }
  }
  const double* uv = u.data();
  double* yv = y.data();
  for (std::int64_t b = 0; b < su.b; ++b) {
    for (std::int64_t c = 0; c < su.c; ++c) {
      const double* up = uv + (b * su.c + c) * plane;
      double* yp = yv + (b * su.c + c) * opix;
      const std::int64_t* sp = src->data() + b * opix;
      for (std::int64_t o = 0; o < opix; ++o) yp[o] = up[sp[o]];
    }
  }
  if (tape && (u.requires_grad() || offsets.requires_grad())) {
    y.set_requires_grad(true);
    tape->record("guided_sample_nearest", {u, offsets}, {y},
                 [u = u, y, src, su, opix, plane]() mutable {
                   if (!u.requires_grad()) return;
                   u.ensure_grad();
                   const double* g = y.grad();
                   double* gu = u.grad();
                   for (std::int64_t b = 0; b < su.b; ++b) {
                     for (std::int64_t c = 0; c < su.c; ++c) {
                       double* gup = gu + (b * su.c + c) * plane;
                       const double* gp = g + (b * su.c + c) * opix;
                       const std::int64_t* sp = src->data() + b * opix;
                       for (std::int64_t o = 0; o < opix; ++o) gup[sp[o]] += gp[o];
                     }
                   }
                 });
  }
  return y;
}

namespace {

// Per-pixel bilinear tap: corner indices, fractional weights, and the
// index-space derivative scale of each axis (zero where the clamp engaged).
struct BilinearTap {
  std::int32_t x0, x1, y0, y1;
  double wx, wy;
  double dxdp, dydq;
};

}  // namespace

Tensor guided_sample_bilinear(const Tensor& u, const SampleGrid& grid, const Tensor& offsets,
                              Tape* tape) {
  const Shape& su = u.shape();
  const Shape& sg = grid.coords.shape();
  const Shape& so = offsets.shape();
  check_sampling_shapes(su, sg, so);
  const std::int64_t oh = sg.h, ow = sg.w, opix = oh * ow;
  const std::int64_t plane = su.h * su.w;
  Tensor y(Shape{su.b, su.c, oh, ow});
  auto taps = std::make_shared<std::vector<BilinearTap>>(static_cast<std::size_t>(su.b * opix));
  const double* gv = grid.coords.data();
  const double* ov = offsets.data();
  for (std::int64_t b = 0; b < su.b; ++b) {
    const std::int64_t gb = sg.b == 1 ? 0 : b;
    const double* gx = gv + (gb * 2 + 0) * opix;
    const double* gy = gv + (gb * 2 + 1) * opix;
    const double* px = ov + (b * 2 + 0) * opix;
    const double* py = ov + (b * 2 + 1) * opix;
    for (std::int64_t o = 0; o < opix; ++o) {
      const double sx = gx[o] + px[o];
      const double sy = gy[o] + py[o];
      const double cx = std::clamp(sx, -1.0, 1.0);
      const double cy = std::clamp(sy, -1.0, 1.0);
      const double xf = snap_integer(denorm_coord(cx, su.w));
      const double yf = snap_integer(denorm_coord(cy, su.h));
      BilinearTap t;
      const double fx = std::floor(xf);
      const double fy = std::floor(yf);
      t.x0 = static_cast<std::int32_t>(std::clamp<std::int64_t>(
          static_cast<std::int64_t>(fx), 0, su.w - 1));
      t.y0 = static_cast<std::int32_t>(std::clamp<std::int64_t>(
          static_cast<std::int64_t>(fy), 0, su.h - 1));
      t.x1 = static_cast<std::int32_t>(std::min<std::int64_t>(t.x0 + 1, su.w - 1));
      t.y1 = static_cast<std::int32_t>(std::min<std::int64_t>(t.y0 + 1, su.h - 1));
      t.wx = xf - static_cast<double>(t.x0);
      t.wy = yf - static_cast<double>(t.y0);
      t.dxdp = (sx == cx && su.w > 1) ? 0.5 * static_cast<double>(su.w - 1) : 0.0;
      t.dydq = (sy == cy && su.h > 1) ? 0.5 * static_cast<double>(su.h - 1) : 0.0;
      (*taps)[static_cast<std::size_t>(b * opix + o)] = t;
    }
  }
  const double* uv = u.data();
  double* yv = y.data();
  for (std::int64_t b = 0; b < su.b; ++b) {
    for (std::int64_t c = 0; c < su.c; ++c) {
      const double* up = uv + (b * su.c + c) * plane;
      double* yp = yv + (b * su.c + c) * opix;
      const BilinearTap* tp = taps->data() + b * opix;
      for (std::int64_t o = 0; o < opix; ++o) {
        const BilinearTap& t = tp[o];
        const double top = (1.0 - t.wx) * up[t.y0 * su.w + t.x0] + t.wx * up[t.y0 * su.w + t.x1];
        const double bot = (1.0 - t.wx) * up[t.y1 * su.w + t.x0] + t.wx * up[t.y1 * su.w + t.x1];
        yp[o] = (1.0 - t.wy) * top + t.wy * bot;
      }
    }
  }
  if (tape && (u.requires_grad() || offsets.requires_grad())) {
    y.set_requires_grad(true);
    tape->record(
        "guided_sample_bilinear", {u, offsets}, {y},
        [u = u, offsets = offsets, y, taps, su, opix, plane]() mutable {
          const double* g = y.grad();
          const double* uv2 = u.data();
          double* gu = nullptr;
          double* go = nullptr;
          if (u.requires_grad()) {
            u.ensure_grad();
            gu = u.grad();
          }
          if (offsets.requires_grad()) {
            offsets.ensure_grad();
            go = offsets.grad();
          }
          for (std::int64_t b = 0; b < su.b; ++b) {
            const BilinearTap* tp = taps->data() + b * opix;
            for (std::int64_t o = 0; o < opix; ++o) {
              const BilinearTap& t = tp[o];
              double acc_dx = 0.0;
              double acc_dy = 0.0;
              for (std::int64_t c = 0; c < su.c; ++c) {
                const double gi = g[(b * su.c + c) * opix + o];
                if (gi == 0.0) continue;
                const std::int64_t base = (b * su.c + c) * plane;
                const double u00 = uv2[base + t.y0 * su.w + t.x0];
                const double u01 = uv2[base + t.y0 * su.w + t.x1];
                const double u10 = uv2[base + t.y1 * su.w + t.x0];
                const double u11 = uv2[base + t.y1 * su.w + t.x1];
                if (gu) {
                  gu[base + t.y0 * su.w + t.x0] += gi * (1.0 - t.wx) * (1.0 - t.wy);
                  gu[base + t.y0 * su.w + t.x1] += gi * t.wx * (1.0 - t.wy);
                  gu[base + t.y1 * su.w + t.x0] += gi * (1.0 - t.wx) * t.wy;
                  gu[base + t.y1 * su.w + t.x1] += gi * t.wx * t.wy;
                }
                if (go) {
                  acc_dx += gi * ((1.0 - t.wy) * (u01 - u00) + t.wy * (u11 - u10));
                  acc_dy += gi * ((1.0 - t.wx) * (u10 - u00) + t.wx * (u11 - u01));
                }
              }
              if (go) {
                go[(b * 2 + 0) * opix + o] += acc_dx * t.dxdp;
                go[(b * 2 + 1) * opix + o] += acc_dy * t.dydq;
              }
            }
          }
        });
  }
  return y;
}

Tensor guided_sample(const Tensor& u, const SampleGrid& grid, const Tensor& offsets,
                     SampleMode mode, Tape* tape) {
  return mode == SampleMode::kNearest ? guided_sample_nearest(u, grid, offsets, tape)
                                      : guided_sample_bilinear(u, grid, offsets, tape);
}

Tensor bound_offsets(const Tensor& raw, Tape* tape) {
  if (raw.shape().c != 2) {
    throw ShapeError("offset table needs exactly 2 channels, got " + raw.shape().str());
  }
  // tanh saturates to exactly +-1.0 in doubles; pull saturated values one ulp
  // inside so bounded tables always lie strictly within (-1, 1).
  const double lim = std::nextafter(1.0, 0.0);
  const std::int64_t n = raw.numel();
  Tensor y(raw.shape());
  const double* xv = raw.data();
  double* yv = y.data();
  for (std::int64_t i = 0; i < n; ++i) {
    yv[i] = std::clamp(std::tanh(xv[i]), -lim, lim);
  }
  if (tape && raw.requires_grad()) {
    y.set_requires_grad(true);
    tape->record("bound_offsets", {raw}, {y}, [raw = raw, y, n]() mutable {
      const double* g = y.grad();
      const double* yv2 = y.data();
      raw.ensure_grad();
      double* gx = raw.grad();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * (1.0 - yv2[i] * yv2[i]);
    });
  }
  return y;
}

}  // namespace wseg

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <vector>

#include "wseg/tensor.hpp"

namespace wseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::MatrixXd;

struct ConvGeom {
  std::int64_t B, inC, H, W;
  std::int64_t outC, kH, kW;
  std::int64_t stride, dil_h, dil_w, pad_h, pad_w;
  std::int64_t outH, outW;
  std::int64_t K;  // inC * kH * kW
  std::int64_t N;  // B * outH * outW
};

ConvGeom make_geom(const Shape& in, const Shape& wt, const Conv2dOpts& o) {
  if (o.stride < 1 || o.dil_h < 1 || o.dil_w < 1) {
    throw ConfigError("conv2d stride and dilation must be >= 1");
  }
  if (o.pad_h < 0 || o.pad_w < 0) throw ConfigError("conv2d padding must be >= 0");
  if (in.c != wt.c) {
    throw ShapeError("conv2d channel mismatch: input " + in.str() + " vs weight " + wt.str());
  }
  ConvGeom g;
  g.B = in.b;
  g.inC = in.c;
  g.H = in.h;
  g.W = in.w;
  g.outC = wt.b;
  g.kH = wt.h;
  g.kW = wt.w;
  g.stride = o.stride;
  g.dil_h = o.dil_h;
  g.dil_w = o.dil_w;
  g.pad_h = o.pad_h;
  g.pad_w = o.pad_w;
  g.outH = (g.H + 2 * g.pad_h - g.dil_h * (g.kH - 1) - 1) / g.stride + 1;
  g.outW = (g.W + 2 * g.pad_w - g.dil_w * (g.kW - 1) - 1) / g.stride + 1;
  if (g.H + 2 * g.pad_h < g.dil_h * (g.kH - 1) + 1 || g.W + 2 * g.pad_w < g.dil_w * (g.kW - 1) + 1) {
    throw ShapeError("conv2d kernel does not fit input " + in.str());
  }
  g.K = g.inC * g.kH * g.kW;
  g.N = g.B * g.outH * g.outW;
  return g;
}

// Column n = (b, oy, ox); row k = (ic, ky, kx). Out-of-bounds taps are zero.
void im2col(const double* xv, const ConvGeom& g, ColMat& col) {
  col.resize(g.K, g.N);
  std::int64_t n = 0;
  for (std::int64_t b = 0; b < g.B; ++b) {
    for (std::int64_t oy = 0; oy < g.outH; ++oy) {
      for (std::int64_t ox = 0; ox < g.outW; ++ox, ++n) {
        double* cp = col.data() + n * g.K;
        std::int64_t k = 0;
        for (std::int64_t ic = 0; ic < g.inC; ++ic) {
          const double* xplane = xv + (b * g.inC + ic) * g.H * g.W;
          for (std::int64_t ky = 0; ky < g.kH; ++ky) {
            const std::int64_t iy = oy * g.stride - g.pad_h + ky * g.dil_h;
            for (std::int64_t kx = 0; kx < g.kW; ++kx, ++k) {
              const std::int64_t ix = ox * g.stride - g.pad_w + kx * g.dil_w;
              cp[k] = (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W) ? xplane[iy * g.W + ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void forward_direct(const double* xv, const double* wv, const double* bv, const ConvGeom& g,
                    double* yv) {
  for (std::int64_t b = 0; b < g.B; ++b) {
    for (std::int64_t oc = 0; oc < g.outC; ++oc) {
      const double* wbase = wv + oc * g.K;
      double* yp = yv + (b * g.outC + oc) * g.outH * g.outW;
      for (std::int64_t oy = 0; oy < g.outH; ++oy) {
        for (std::int64_t ox = 0; ox < g.outW; ++ox) {
          double acc = bv ? bv[oc] : 0.0;
          std::int64_t k = 0;
          for (std::int64_t ic = 0; ic < g.inC; ++ic) {
            const double* xplane = xv + (b * g.inC + ic) * g.H * g.W;
            for (std::int64_t ky = 0; ky < g.kH; ++ky) {
              const std::int64_t iy = oy * g.stride - g.pad_h + ky * g.dil_h;
              for (std::int64_t kx = 0; kx < g.kW; ++kx, ++k) {
                const std::int64_t ix = ox * g.stride - g.pad_w + kx * g.dil_w;
                if (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W) {
                  acc += wbase[k] * xplane[iy * g.W + ix];
                }
              }
            }
          }
          yp[oy * g.outW + ox] = acc;
        }
      }
    }
  }
}

void forward_gemm(const double* xv, const double* wv, const double* bv, const ConvGeom& g,
                  double* yv) {
  ColMat col;
  im2col(xv, g, col);
  Eigen::Map<const RowMat> wm(wv, g.outC, g.K);
  ColMat out(g.outC, g.N);
  out.noalias() = wm * col;
  std::int64_t n = 0;
  const std::int64_t ohw = g.outH * g.outW;
  for (std::int64_t b = 0; b < g.B; ++b) {
    for (std::int64_t p = 0; p < ohw; ++p, ++n) {
      const double* op = out.data() + n * g.outC;
      for (std::int64_t oc = 0; oc < g.outC; ++oc) {
        yv[(b * g.outC + oc) * ohw + p] = op[oc] + (bv ? bv[oc] : 0.0);
      }
    }
  }
}

void backward_direct(const double* xv, const double* wv, const double* gy, const ConvGeom& g,
                     double* gx, double* gw, double* gb) {
  for (std::int64_t b = 0; b < g.B; ++b) {
    for (std::int64_t oc = 0; oc < g.outC; ++oc) {
      const double* wbase = wv + oc * g.K;
      const double* gp = gy + (b * g.outC + oc) * g.outH * g.outW;
      for (std::int64_t oy = 0; oy < g.outH; ++oy) {
        for (std::int64_t ox = 0; ox < g.outW; ++ox) {
          const double go = gp[oy * g.outW + ox];
          if (gb) gb[oc] += go;
          std::int64_t k = 0;
          for (std::int64_t ic = 0; ic < g.inC; ++ic) {
            const std::int64_t plane = (b * g.inC + ic) * g.H * g.W;
            for (std::int64_t ky = 0; ky < g.kH; ++ky) {
              const std::int64_t iy = oy * g.stride - g.pad_h + ky * g.dil_h;
              for (std::int64_t kx = 0; kx < g.kW; ++kx, ++k) {
                const std::int64_t ix = ox * g.stride - g.pad_w + kx * g.dil_w;
                if (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W) {
                  const std::int64_t xi = plane + iy * g.W + ix;
                  if (gw) gw[oc * g.K + k] += go * xv[xi];
                  if (gx) gx[xi] += go * wbase[k];
                }
              }
            }
          }
        }
      }
    }
  }
}

void backward_gemm(const double* xv, const double* wv, const double* gy, const ConvGeom& g,
                   double* gx, double* gw, double* gb) {
  const std::int64_t ohw = g.outH * g.outW;
  ColMat gmat(g.outC, g.N);
  {
    std::int64_t n = 0;
    for (std::int64_t b = 0; b < g.B; ++b) {
      for (std::int64_t p = 0; p < ohw; ++p, ++n) {
        double* gp = gmat.data() + n * g.outC;
        for (std::int64_t oc = 0; oc < g.outC; ++oc) gp[oc] = gy[(b * g.outC + oc) * ohw + p];
      }
    }
  }
  if (gb) {
    for (std::int64_t oc = 0; oc < g.outC; ++oc) gb[oc] += gmat.row(oc).sum();
  }
  if (gw) {
    ColMat col;
    im2col(xv, g, col);
    RowMat wgrad(g.outC, g.K);
    wgrad.noalias() = gmat * col.transpose();
    for (std::int64_t i = 0; i < g.outC * g.K; ++i) gw[i] += wgrad.data()[i];
  }
  if (gx) {
    Eigen::Map<const RowMat> wm(wv, g.outC, g.K);
    ColMat colg(g.K, g.N);
    colg.noalias() = wm.transpose() * gmat;
    std::int64_t n = 0;
    for (std::int64_t b = 0; b < g.B; ++b) {
      for (std::int64_t oy = 0; oy < g.outH; ++oy) {
        for (std::int64_t ox = 0; ox < g.outW; ++ox, ++n) {
          const double* cp = colg.data() + n * g.K;
          std::int64_t k = 0;
          for (std::int64_t ic = 0; ic < g.inC; ++ic) {
            double* gplane = gx + (b * g.inC + ic) * g.H * g.W;
            for (std::int64_t ky = 0; ky < g.kH; ++ky) {
              const std::int64_t iy = oy * g.stride - g.pad_h + ky * g.dil_h;
              for (std::int64_t kx = 0; kx < g.kW; ++kx, ++k) {
                const std::int64_t ix = ox * g.stride - g.pad_w + kx * g.dil_w;
                if (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W) gplane[iy * g.W + ix] += cp[k];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              const Conv2dOpts& opts, Tape* tape) {
  const ConvGeom g = make_geom(input.shape(), weight.shape(), opts);
  if (bias && !(bias->shape() == Shape{1, g.outC, 1, 1})) {
    throw ShapeError("conv2d bias must be (1," + std::to_string(g.outC) + ",1,1), got " +
                     bias->shape().str());
  }
  const ConvImpl impl = opts.impl == ConvImpl::kAuto ? ConvImpl::kGemm : opts.impl;
  Tensor y(Shape{g.B, g.outC, g.outH, g.outW});
  const double* bv = bias ? bias->data() : nullptr;
  if (impl == ConvImpl::kDirect) {
    forward_direct(input.data(), weight.data(), bv, g, y.data());
  } else {
    forward_gemm(input.data(), weight.data(), bv, g, y.data());
  }

  const bool needs =
      tape && (input.requires_grad() || weight.requires_grad() || (bias && bias->requires_grad()));
  if (needs) {
    y.set_requires_grad(true);
    Tensor x = input;
    Tensor w = weight;
    std::optional<Tensor> bb = bias;
    auto back = [x, w, bb, y, g, impl]() mutable {
      const double* gy = y.grad();
      double* gx = nullptr;
      double* gw = nullptr;
      double* gb = nullptr;
      if (x.requires_grad()) {
        x.ensure_grad();
        gx = x.grad();
      }
      if (w.requires_grad()) {
        w.ensure_grad();
        gw = w.grad();
      }
      if (bb && bb->requires_grad()) {
        bb->ensure_grad();
        gb = bb->grad();
      }
      if (!gx && !gw && !gb) return;
      if (impl == ConvImpl::kDirect) {
        backward_direct(x.data(), w.data(), gy, g, gx, gw, gb);
      } else {
        backward_gemm(x.data(), w.data(), gy, g, gx, gw, gb);
      }
    };
    if (bias) {
      tape->record("conv2d", {input, weight, *bias}, {y}, std::move(back));
    } else {
      tape->record("conv2d", {input, weight}, {y}, std::move(back));
    }
  }
  return y;
}

}  // namespace wseg

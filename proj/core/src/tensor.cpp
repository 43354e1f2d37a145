#include "wseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include "wseg/util.hpp"

namespace wseg {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << b << "," << c << "," << h << "," << w << ")";
  return os.str();
}

Tensor::Tensor(Shape s, double fill, bool requires_grad) {
  if (s.b < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
    throw ShapeError("negative dimension in shape " + s.str());
  }
  d_ = std::make_shared<detail::TensorData>();
  d_->shape = s;
  d_->values.assign(static_cast<std::size_t>(s.numel()), fill);
  d_->requires_grad = requires_grad;
}

Tensor Tensor::from_vector(Shape s, std::vector<double> values, bool requires_grad) {
  if (static_cast<std::int64_t>(values.size()) != s.numel()) {
    throw ShapeError("value count does not match shape " + s.str());
  }
  Tensor t(s, 0.0, requires_grad);
  t.d_->values = std::move(values);
  return t;
}

void Tensor::ensure_grad() {
  if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : d_->values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.d_ = std::make_shared<detail::TensorData>();
  t.d_->shape = d_->shape;
  t.d_->values = d_->values;
  t.d_->requires_grad = d_->requires_grad;
  return t;
}

void Tape::record(const char* op, std::initializer_list<Tensor> inputs,
                  std::initializer_list<Tensor> outputs, std::function<void()> backward) {
  Node n;
  n.op = op;
  for (const Tensor& t : inputs) n.inputs.push_back(t.impl());
  for (const Tensor& t : outputs) {
    t.impl()->producer = this;
    n.outputs.push_back(t.impl());
  }
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
}

void backward(const Tensor& loss, Tape& tape) {
  if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got " + loss.shape().str());
  if (loss.producer() != &tape) {
    throw UsageError("loss tensor was not produced by an operation recorded on this tape");
  }
  Tensor seed = loss;
  seed.ensure_grad();
  seed.grad()[0] = 1.0;
  for (std::size_t i = tape.size(); i-- > 0;) {
    const Tape::Node& n = tape.node(i);
    bool live = false;
    for (const auto& out : n.outputs) {
      if (!out->grad.empty()) {
        live = true;
        break;
      }
    }
    if (live && n.backward) n.backward();
  }
}

namespace {

bool wants_grad(Tape* tape, std::initializer_list<Tensor> ins) {
  if (!tape) return false;
  for (const Tensor& t : ins) {
    if (t.requires_grad()) return true;
  }
  return false;
}

void accumulate(Tensor t, const double* g, std::int64_t n) {
  if (!t.requires_grad()) return;
  t.ensure_grad();
  double* dst = t.grad();
  for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x, Tape* tape) {
  const std::int64_t n = x.numel();
  Tensor y(x.shape());
  const double* xv = x.data();
  double* yv = y.data();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (wants_grad(tape, {x})) {
    y.set_requires_grad(true);
    tape->record("relu", {x}, {y}, [x = x, y, n]() mutable {
      const double* g = y.grad();
      const double* xv2 = x.data();
      x.ensure_grad();
      double* gx = x.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        if (xv2[i] > 0.0) gx[i] += g[i];
      }
    });
  }
  return y;
}

Tensor prelu(const Tensor& x, const Tensor& slopes, Tape* tape) {
  const Shape& s = x.shape();
  if (slopes.shape() != Shape{1, s.c, 1, 1}) {
    throw ShapeError("prelu slopes must be (1," + std::to_string(s.c) + ",1,1), got " +
                     slopes.shape().str());
  }
  Tensor y(s);
  const double* xv = x.data();
  const double* av = slopes.data();
  double* yv = y.data();
  const std::int64_t plane = s.h * s.w;
  for (std::int64_t b = 0; b < s.b; ++b) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      const double a = av[c];
      const double* xp = xv + (b * s.c + c) * plane;
      double* yp = yv + (b * s.c + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) yp[i] = xp[i] >= 0.0 ? xp[i] : a * xp[i];
    }
  }
  if (wants_grad(tape, {x, slopes})) {
    y.set_requires_grad(true);
    tape->record("prelu", {x, slopes}, {y}, [x = x, slopes = slopes, y, s, plane]() mutable {
      const double* g = y.grad();
      const double* xv2 = x.data();
      const double* av2 = slopes.data();
      double* gx = nullptr;
      double* ga = nullptr;
      if (x.requires_grad()) {
        x.ensure_grad();
        gx = x.grad();
      }
      if (slopes.requires_grad()) {
        slopes.ensure_grad();
        ga = slopes.grad();
      }
      for (std::int64_t b = 0; b < s.b; ++b) {
        for (std::int64_t c = 0; c < s.c; ++c) {
          const double a = av2[c];
          const std::int64_t base = (b * s.c + c) * plane;
          double acc = 0.0;
          for (std::int64_t i = 0; i < plane; ++i) {
            const double xi = xv2[base + i];
            const double gi = g[base + i];
            if (gx) gx[base + i] += xi >= 0.0 ? gi : a * gi;
            if (xi < 0.0) acc += gi * xi;
          }
          if (ga) ga[c] += acc;
        }
      }
    });
  }
  return y;
}

Tensor tanh_act(const Tensor& x, Tape* tape) {
  const std::int64_t n = x.numel();
  Tensor y(x.shape());
  const double* xv = x.data();
  double* yv = y.data();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = std::tanh(xv[i]);
  if (wants_grad(tape, {x})) {
    y.set_requires_grad(true);
    tape->record("tanh", {x}, {y}, [x = x, y, n]() mutable {
      const double* g = y.grad();
      const double* yv2 = y.data();
      x.ensure_grad();
      double* gx = x.grad();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * (1.0 - yv2[i] * yv2[i]);
    });
  }
  return y;
}

Tensor activation(const Tensor& x, ActKind kind, const Tensor* prelu_slopes, Tape* tape) {
  switch (kind) {
    case ActKind::kRelu:
      return relu(x, tape);
    case ActKind::kPRelu:
      if (!prelu_slopes) throw UsageError("prelu activation needs a slope tensor");
      return prelu(x, *prelu_slopes, tape);
    case ActKind::kTanh:
      return tanh_act(x, tape);
  }
  throw UsageError("unknown activation kind");
}

// ---------------------------------------------------------------------------
// Pooling, concat, residual
// ---------------------------------------------------------------------------

Tensor maxpool2x2(const Tensor& x, Tape* tape) {
  const Shape& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("maxpool2x2 needs even spatial dims, got " + s.str());
  }
  const Shape os{s.b, s.c, s.h / 2, s.w / 2};
  Tensor y(os);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(os.numel()));
  const double* xv = x.data();
  double* yv = y.data();
  std::int64_t o = 0;
  for (std::int64_t b = 0; b < s.b; ++b) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t oy = 0; oy < os.h; ++oy) {
        for (std::int64_t ox = 0; ox < os.w; ++ox, ++o) {
          double best = -1.0;
          std::int64_t besti = -1;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::int64_t idx = x.offset(b, c, 2 * oy + dy, 2 * ox + dx);
              const double v = xv[idx];
              if (besti < 0 || v > best) {
                best = v;
                besti = idx;
              }
            }
          }
          yv[o] = best;
          (*argmax)[static_cast<std::size_t>(o)] = besti;
        }
      }
    }
  }
  if (wants_grad(tape, {x})) {
    y.set_requires_grad(true);
    const std::int64_t on = os.numel();
    tape->record("maxpool2x2", {x}, {y}, [x = x, y, argmax, on]() mutable {
      const double* g = y.grad();
      x.ensure_grad();
      double* gx = x.grad();
      for (std::int64_t i = 0; i < on; ++i) gx[(*argmax)[static_cast<std::size_t>(i)]] += g[i];
    });
  }
  return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.b != sb.b || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels mismatch: " + sa.str() + " vs " + sb.str());
  }
  const Shape os{sa.b, sa.c + sb.c, sa.h, sa.w};
  Tensor y(os);
  const std::int64_t plane = sa.h * sa.w;
  for (std::int64_t bi = 0; bi < sa.b; ++bi) {
    std::memcpy(y.data() + (bi * os.c) * plane, a.data() + (bi * sa.c) * plane,
                static_cast<std::size_t>(sa.c * plane) * sizeof(double));
    std::memcpy(y.data() + (bi * os.c + sa.c) * plane, b.data() + (bi * sb.c) * plane,
                static_cast<std::size_t>(sb.c * plane) * sizeof(double));
  }
  if (wants_grad(tape, {a, b})) {
    y.set_requires_grad(true);
    tape->record("concat_channels", {a, b}, {y}, [a = a, b = b, y, sa, sb, os, plane]() mutable {
      const double* g = y.grad();
      for (std::int64_t bi = 0; bi < sa.b; ++bi) {
        if (a.requires_grad()) {
          a.ensure_grad();
          double* ga = a.grad() + (bi * sa.c) * plane;
          const double* gs = g + (bi * os.c) * plane;
          for (std::int64_t i = 0; i < sa.c * plane; ++i) ga[i] += gs[i];
        }
        if (b.requires_grad()) {
          b.ensure_grad();
          double* gb = b.grad() + (bi * sb.c) * plane;
          const double* gs = g + (bi * os.c + sa.c) * plane;
          for (std::int64_t i = 0; i < sb.c * plane; ++i) gb[i] += gs[i];
        }
      }
    });
  }
  return y;
}

Tensor residual_add(const Tensor& a, const Tensor& b, Tape* tape) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("residual_add mismatch: " + a.shape().str() + " vs " + b.shape().str());
  }
  const std::int64_t n = a.numel();
  Tensor y(a.shape());
  const double* av = a.data();
  const double* bv = b.data();
  double* yv = y.data();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = av[i] + bv[i];
  if (wants_grad(tape, {a, b})) {
    y.set_requires_grad(true);
    tape->record("residual_add", {a, b}, {y}, [a = a, b = b, y, n]() mutable {
      accumulate(a, y.grad(), n);
      accumulate(b, y.grad(), n);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, Mode mode,
                   const BnOpts& opts, Tape* tape) {
  const Shape& s = x.shape();
  const Shape ps{1, s.c, 1, 1};
  for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&running_mean),
                          static_cast<const Tensor*>(&running_var)}) {
    if (!(t->shape() == ps)) {
      throw ShapeError("batchnorm parameter shape " + t->shape().str() + " does not match " +
                       ps.str());
    }
  }
  const std::int64_t m = s.b * s.h * s.w;
  if (m == 0) throw ConfigError("batchnorm over an empty batch");
  const std::int64_t plane = s.h * s.w;
  Tensor y(s);
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(s.numel()));
  auto istd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(s.c));

  const double* xv = x.data();
  double* yv = y.data();
  const double* gv = gamma.data();
  const double* bv = beta.data();

  if (mode == Mode::kTrain) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      double mean = 0.0;
      for (std::int64_t b = 0; b < s.b; ++b) {
        const double* xp = xv + (b * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) mean += xp[i];
      }
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::int64_t b = 0; b < s.b; ++b) {
        const double* xp = xv + (b * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = xp[i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + opts.eps);
      (*istd)[static_cast<std::size_t>(c)] = is;
      for (std::int64_t b = 0; b < s.b; ++b) {
        const double* xp = xv + (b * s.c + c) * plane;
        double* xh = xhat->data() + (b * s.c + c) * plane;
        double* yp = yv + (b * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          xh[i] = (xp[i] - mean) * is;
          yp[i] = gv[c] * xh[i] + bv[c];
        }
      }
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      running_mean.data()[c] = (1.0 - opts.momentum) * running_mean.data()[c] + opts.momentum * mean;
      running_var.data()[c] = (1.0 - opts.momentum) * running_var.data()[c] + opts.momentum * unbiased;
    }
  } else {
    for (std::int64_t c = 0; c < s.c; ++c) {
      const double is = 1.0 / std::sqrt(running_var.data()[c] + opts.eps);
      const double rm = running_mean.data()[c];
      (*istd)[static_cast<std::size_t>(c)] = is;
      for (std::int64_t b = 0; b < s.b; ++b) {
        const double* xp = xv + (b * s.c + c) * plane;
        double* xh = xhat->data() + (b * s.c + c) * plane;
        double* yp = yv + (b * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          xh[i] = (xp[i] - rm) * is;
          yp[i] = gv[c] * xh[i] + bv[c];
        }
      }
    }
  }

  if (wants_grad(tape, {x, gamma, beta})) {
    y.set_requires_grad(true);
    const bool train = mode == Mode::kTrain;
    tape->record("batchnorm2d", {x, gamma, beta}, {y},
                 [x = x, gamma = gamma, beta = beta, y, xhat, istd, s, plane, m, train]() mutable {
                   const double* g = y.grad();
                   const double* gv2 = gamma.data();
                   double* gx = nullptr;
                   double* gg = nullptr;
                   double* gb = nullptr;
                   if (x.requires_grad()) {
                     x.ensure_grad();
                     gx = x.grad();
                   }
                   if (gamma.requires_grad()) {
                     gamma.ensure_grad();
                     gg = gamma.grad();
                   }
                   if (beta.requires_grad()) {
                     beta.ensure_grad();
                     gb = beta.grad();
                   }
                   for (std::int64_t c = 0; c < s.c; ++c) {
                     double sum_g = 0.0;
                     double sum_gx = 0.0;
                     for (std::int64_t b = 0; b < s.b; ++b) {
                       const std::int64_t base = (b * s.c + c) * plane;
                       for (std::int64_t i = 0; i < plane; ++i) {
                         sum_g += g[base + i];
                         sum_gx += g[base + i] * (*xhat)[static_cast<std::size_t>(base + i)];
                       }
                     }
                     if (gb) gb[c] += sum_g;
                     if (gg) gg[c] += sum_gx;
                     if (gx) {
                       const double is = (*istd)[static_cast<std::size_t>(c)];
                       const double k = gv2[c] * is;
                       const double mg = sum_g / static_cast<double>(m);
                       const double mgx = sum_gx / static_cast<double>(m);
                       for (std::int64_t b = 0; b < s.b; ++b) {
                         const std::int64_t base = (b * s.c + c) * plane;
                         for (std::int64_t i = 0; i < plane; ++i) {
                           const double xh = (*xhat)[static_cast<std::size_t>(base + i)];
                           // Eval mode treats the stats as constants.
                           gx[base + i] += train ? k * (g[base + i] - mg - xh * mgx)
                                                 : k * g[base + i];
                         }
                       }
                     }
                   }
                 });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

Tensor dropout(const Tensor& x, double p, Mode mode, std::uint64_t seed, Tape* tape) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  if (mode == Mode::kEval || p == 0.0) return x;
  const std::int64_t n = x.numel();
  Tensor y(x.shape());
  auto mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(n));
  Rng rng(seed);
  const double scale = 1.0 / (1.0 - p);
  const double* xv = x.data();
  double* yv = y.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const bool keep = rng.uniform() >= p;
    (*mask)[static_cast<std::size_t>(i)] = keep ? 1 : 0;
    yv[i] = keep ? xv[i] * scale : 0.0;
  }
  if (wants_grad(tape, {x})) {
    y.set_requires_grad(true);
    tape->record("dropout", {x}, {y}, [x = x, y, mask, scale, n]() mutable {
      const double* g = y.grad();
      x.ensure_grad();
      double* gx = x.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        if ((*mask)[static_cast<std::size_t>(i)]) gx[i] += g[i] * scale;
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions, elementwise, cross-entropy
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x, Tape* tape) {
  const std::int64_t n = x.numel();
  Tensor y(Shape{1, 1, 1, 1});
  double acc = 0.0;
  const double* xv = x.data();
  for (std::int64_t i = 0; i < n; ++i) acc += xv[i];
  y.data()[0] = acc;
  if (wants_grad(tape, {x})) {
    y.set_requires_grad(true);
    tape->record("sum", {x}, {y}, [x = x, y, n]() mutable {
      const double g = y.grad()[0];
      x.ensure_grad();
      double* gx = x.grad();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("mul mismatch: " + a.shape().str() + " vs " + b.shape().str());
  }
  const std::int64_t n = a.numel();
  Tensor y(a.shape());
  const double* av = a.data();
  const double* bv = b.data();
  double* yv = y.data();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = av[i] * bv[i];
  if (wants_grad(tape, {a, b})) {
    y.set_requires_grad(true);
    tape->record("mul", {a, b}, {y}, [a = a, b = b, y, n]() mutable {
      const double* g = y.grad();
      if (a.requires_grad()) {
        a.ensure_grad();
        double* ga = a.grad();
        const double* bv2 = b.data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv2[i];
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        double* gb = b.grad();
        const double* av2 = a.data();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * av2[i];
      }
    });
  }
  return y;
}

Tensor add_scaled(const Tensor& a, const Tensor& b, double alpha, Tape* tape) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("add_scaled mismatch: " + a.shape().str() + " vs " + b.shape().str());
  }
  const std::int64_t n = a.numel();
  Tensor y(a.shape());
  const double* av = a.data();
  const double* bv = b.data();
  double* yv = y.data();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = av[i] + alpha * bv[i];
  if (wants_grad(tape, {a, b})) {
    y.set_requires_grad(true);
    tape->record("add_scaled", {a, b}, {y}, [a = a, b = b, y, alpha, n]() mutable {
      const double* g = y.grad();
      accumulate(a, g, n);
      if (b.requires_grad()) {
        b.ensure_grad();
        double* gb = b.grad();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += alpha * g[i];
      }
    });
  }
  return y;
}

Tensor softmax_cross_entropy(const Tensor& logits, const LabelMap& target, Tape* tape) {
  const Shape& s = logits.shape();
  if (s.c == 0) throw ShapeError("cross entropy over zero classes");
  if (target.batch != s.b || target.h != s.h || target.w != s.w) {
    throw ShapeError("cross entropy target plane does not match logits " + s.str());
  }
  const std::int64_t npix = s.b * s.h * s.w;
  if (npix == 0) throw ShapeError("cross entropy over an empty plane");
  const std::int64_t plane = s.h * s.w;
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(s.numel()));
  const double* lv = logits.data();
  double loss = 0.0;
  for (std::int64_t b = 0; b < s.b; ++b) {
    for (std::int64_t p = 0; p < plane; ++p) {
      const std::int32_t t = target.v[static_cast<std::size_t>(b * plane + p)];
      if (t < 0 || t >= s.c) throw ConfigError("target class id out of range");
      double mx = lv[(b * s.c) * plane + p];
      for (std::int64_t c = 1; c < s.c; ++c) {
        mx = std::max(mx, lv[(b * s.c + c) * plane + p]);
      }
      double z = 0.0;
      for (std::int64_t c = 0; c < s.c; ++c) {
        z += std::exp(lv[(b * s.c + c) * plane + p] - mx);
      }
      const double logz = mx + std::log(z);
      for (std::int64_t c = 0; c < s.c; ++c) {
        (*probs)[static_cast<std::size_t>((b * s.c + c) * plane + p)] =
            std::exp(lv[(b * s.c + c) * plane + p] - logz);
      }
      loss += logz - lv[(b * s.c + t) * plane + p];
    }
  }
  Tensor y(Shape{1, 1, 1, 1});
  y.data()[0] = loss / static_cast<double>(npix);
  if (wants_grad(tape, {logits})) {
    y.set_requires_grad(true);
    LabelMap tgt = target;  // keep label data alive with the closure
    tape->record("softmax_cross_entropy", {logits}, {y},
                 [logits = logits, y, probs, tgt = std::move(tgt), s, plane, npix]() mutable {
                   const double g0 = y.grad()[0] / static_cast<double>(npix);
                   Tensor l = logits;
                   l.ensure_grad();
                   double* gl = l.grad();
                   for (std::int64_t b = 0; b < s.b; ++b) {
                     for (std::int64_t p = 0; p < plane; ++p) {
                       const std::int32_t t = tgt.v[static_cast<std::size_t>(b * plane + p)];
                       for (std::int64_t c = 0; c < s.c; ++c) {
                         const std::int64_t i = (b * s.c + c) * plane + p;
                         const double onehot = c == t ? 1.0 : 0.0;
                         gl[i] += g0 * ((*probs)[static_cast<std::size_t>(i)] - onehot);
                       }
                     }
                   }
                 });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

namespace {

double check_components(const TensorProgram& f, const std::vector<Tensor>& inputs, double eps,
                        const std::vector<std::vector<std::int64_t>>& which) {
  for (const Tensor& t : inputs) {
    Tensor h = t;
    h.zero_grad();
  }
  Tape tape;
  Tensor out = f(inputs, tape);
  if (out.numel() != 1) throw ShapeError("grad_check program must return a scalar");
  backward(out, tape);
  std::vector<std::vector<double>> analytic(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    analytic[i] = inputs[i].has_grad()
                      ? inputs[i].grad_vec()
                      : std::vector<double>(static_cast<std::size_t>(inputs[i].numel()), 0.0);
  }
  tape.clear();

  auto eval = [&]() {
    Tape t;
    return f(inputs, t).data()[0];
  };
  double max_err = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    Tensor in = inputs[i];
    for (std::int64_t j : which[i]) {
      const double save = in.data()[j];
      in.data()[j] = save + eps;
      const double fp = eval();
      in.data()[j] = save - eps;
      const double fm = eval();
      in.data()[j] = save;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i][static_cast<std::size_t>(j)];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

void validate_eps(double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ConfigError("grad_check epsilon must lie in [1e-7, 1e-3]");
  }
}

}  // namespace

double grad_check(const TensorProgram& f, const std::vector<Tensor>& inputs, double epsilon) {
  validate_eps(epsilon);
  std::vector<std::vector<std::int64_t>> which(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    which[i].resize(static_cast<std::size_t>(inputs[i].numel()));
    for (std::int64_t j = 0; j < inputs[i].numel(); ++j) which[i][static_cast<std::size_t>(j)] = j;
  }
  return check_components(f, inputs, epsilon, which);
}

double grad_check_sampled(const TensorProgram& f, const std::vector<Tensor>& inputs,
                          double epsilon, std::int64_t max_components_per_input,
                          std::uint64_t seed) {
  validate_eps(epsilon);
  if (max_components_per_input <= 0) throw ConfigError("component budget must be positive");
  std::vector<std::vector<std::int64_t>> which(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    const std::int64_t n = inputs[i].numel();
    if (n <= max_components_per_input) {
      which[i].resize(static_cast<std::size_t>(n));
      for (std::int64_t j = 0; j < n; ++j) which[i][static_cast<std::size_t>(j)] = j;
    } else {
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
      std::set<std::int64_t> picked;
      while (static_cast<std::int64_t>(picked.size()) < max_components_per_input) {
        picked.insert(rng.uniform_int(0, n - 1));
      }
      which[i].assign(picked.begin(), picked.end());
    }
  }
  return check_components(f, inputs, epsilon, which);
}

Tensor zeros(Shape s, bool requires_grad) { return Tensor(s, 0.0, requires_grad); }

Tensor full(Shape s, double v, bool requires_grad) { return Tensor(s, v, requires_grad); }

}  // namespace wseg

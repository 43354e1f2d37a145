#include "wseg/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>

#include "wseg/igum.hpp"
#include "wseg/instance.hpp"
#include "wseg/net.hpp"
#include "wseg/util.hpp"

namespace wseg {

namespace {

Tensor random_tensor(Shape s, double lo, double hi, Rng& rng) {
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// One per-channel transposed convolution with a fixed bilinear kernel of size
// 2*stride, padding stride/2: the classic learned-upsampling reference. Each
// output phase touches exactly 2x2 taps, so cost is linear in channels.
Tensor deconv_per_channel(const Tensor& x, int stride) {
  const int k = 2 * stride;
  const int pad = stride / 2;
  std::vector<double> w1d(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    w1d[static_cast<std::size_t>(i)] =
        1.0 - std::abs(i + 0.5 - 0.5 * k) / static_cast<double>(stride);
  }
  struct Tap {
    int kx;
    std::int64_t dx;
  };
  std::vector<std::vector<Tap>> phase(static_cast<std::size_t>(stride));
  for (int oy = 0; oy < stride; ++oy) {
    for (int ky = 0; ky < k; ++ky) {
      const int num = oy + pad - ky;
      if (num % stride != 0) continue;
      phase[static_cast<std::size_t>(oy)].push_back({ky, num / stride});
    }
  }

  const Shape& s = x.shape();
  Tensor y(Shape{s.b, s.c, s.h * stride, s.w * stride});
  const std::int64_t oh = y.shape().h, ow = y.shape().w;
  for (std::int64_t b = 0; b < s.b; ++b) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      const double* in = x.data() + (b * s.c + c) * s.h * s.w;
      double* out = y.data() + (b * s.c + c) * oh * ow;
      for (std::int64_t y0 = 0; y0 < oh; ++y0) {
        const auto& py = phase[static_cast<std::size_t>(y0 % stride)];
        const std::int64_t ybase = y0 / stride;
        for (std::int64_t x0 = 0; x0 < ow; ++x0) {
          const auto& px = phase[static_cast<std::size_t>(x0 % stride)];
          const std::int64_t xbase = x0 / stride;
          double acc = 0.0;
          for (const Tap& ty : py) {
            const std::int64_t iy = ybase + ty.dx;
            if (iy < 0 || iy >= s.h) continue;
            for (const Tap& tx : px) {
              const std::int64_t ix = xbase + tx.dx;
              if (ix < 0 || ix >= s.w) continue;
              acc += w1d[static_cast<std::size_t>(ty.kx)] * w1d[static_cast<std::size_t>(tx.kx)] *
                     in[iy * s.w + ix];
            }
          }
          out[y0 * ow + x0] = acc;
        }
      }
    }
  }
  return y;
}

EncoderConfig bench_net_config(int classes) {
  EncoderConfig cfg;
  cfg.classes = classes;
  return cfg;
}

// Written after every run so body results stay observable to the optimizer.
volatile double g_bench_guard = 0.0;

double run_timed(const std::function<void()>& body, int reps) {
  for (int i = 0; i < 10; ++i) body();
  std::vector<double> ms(static_cast<std::size_t>(reps));
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const auto t1 = std::chrono::steady_clock::now();
    ms[static_cast<std::size_t>(i)] =
        std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  std::sort(ms.begin(), ms.end());
  const std::size_t n = ms.size();
  return n % 2 == 1 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
}

}  // namespace

std::vector<std::string> bench_scenarios() {
  return {"igum_decoder", "dense_decoder", "network", "diffuse_step", "pipeline"};
}

BenchReport run_bench(const std::string& scenario, int channels, std::int64_t h, std::int64_t w,
                      int reps) {
  if (reps < 10) throw ConfigError("bench needs reps >= 10");
  if (channels < 1) throw ConfigError("bench needs channels >= 1");
  constexpr int kFactor = 8;
  if (h < kFactor || w < kFactor || h % kFactor != 0 || w % kFactor != 0) {
    throw ConfigError("bench size must be a positive multiple of 8, got " + std::to_string(h) +
                      "x" + std::to_string(w));
  }
  Rng rng(mix_seed(0xbe9c4, static_cast<std::uint64_t>(channels), static_cast<std::uint64_t>(h)));
  const std::int64_t lh = h / kFactor, lw = w / kFactor;
  const IgumConfig up{kFactor, SampleMode::kNearest};

  // The checksum keeps every body observable so nothing is optimized away.
  double sink = 0.0;
  std::function<void()> body;
  if (scenario == "igum_decoder") {
    const Tensor logits = random_tensor({1, channels, lh, lw}, -1.0, 1.0, rng);
    const Tensor raw = random_tensor({1, 2, lh, lw}, -0.2, 0.2, rng);
    body = [&sink, logits, raw, up]() {
      Tensor out = igum_forward(logits, raw, up, nullptr);
      sink += out.data()[0];
    };
  } else if (scenario == "dense_decoder") {
    const Tensor logits = random_tensor({1, channels, lh, lw}, -1.0, 1.0, rng);
    body = [&sink, logits]() {
      Tensor mid = deconv_per_channel(logits, 2);
      Tensor out = deconv_per_channel(mid, 4);
      sink += out.data()[0];
    };
  } else if (scenario == "network") {
    auto net = std::make_shared<Network>(bench_net_config(channels), 1);
    const Tensor image = random_tensor({1, 3, h, w}, 0.0, 1.0, rng);
    body = [&sink, net, image]() {
      NetworkOutput out = net->forward(image, Mode::kEval, nullptr);
      sink += out.logits.data()[0];
    };
  } else if (scenario == "diffuse_step") {
    const Tensor bounded = random_tensor({1, 2, lh, lw}, -0.3, 0.3, rng);
    body = [&sink, bounded]() {
      Tensor out = diffuse(bounded, 1, SampleMode::kNearest, nullptr);
      sink += out.data()[0];
    };
  } else if (scenario == "pipeline") {
    auto net = std::make_shared<Network>(bench_net_config(channels), 1);
    const Tensor image = random_tensor({1, 3, h, w}, 0.0, 1.0, rng);
    body = [&sink, net, image, up]() {
      NetworkOutput out = net->forward(image, Mode::kEval, nullptr);
      Tensor logits_hi = igum_forward(out.logits, out.sem_offsets, up, nullptr);
      Tensor bounded = bound_offsets(out.inst_offsets, nullptr);
      Tensor coords = diffuse(bounded, 30, SampleMode::kNearest, nullptr);
      Tensor coords_hi = upsample_instance_output(coords, out.inst_offsets, up, nullptr);
      InstanceLabeling lab = extract_instances(coords_hi, 64);
      sink += logits_hi.data()[0] + static_cast<double>(lab.ids.v.back());
    };
  } else {
    throw ConfigError("unknown bench scenario '" + scenario + "'");
  }

  BenchReport report;
  report.name = scenario;
  report.shape = std::to_string(channels) + "x" + std::to_string(h) + "x" + std::to_string(w);
  report.reps = reps;
  report.median_ms = run_timed(body, reps);
  report.fps = 1000.0 / report.median_ms;
  g_bench_guard = sink;
  return report;
}

}  // namespace wseg

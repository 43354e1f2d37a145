#include "wseg/instance.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>

namespace wseg {

CentroidTargets centroid_targets(const LabelMap& instances) {
  const std::int64_t B = instances.batch, H = instances.h, W = instances.w;
  CentroidTargets out;
  out.coords = Tensor(Shape{B, 2, H, W});
  out.mask = Tensor(Shape{B, 1, H, W});
  struct Acc {
    double sx = 0, sy = 0;
    std::int64_t n = 0;
  };
  for (std::int64_t b = 0; b < B; ++b) {
    std::unordered_map<std::int32_t, Acc> acc;
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        const std::int32_t id = instances.at(b, y, x);
        if (id == 0) continue;
        Acc& a = acc[id];
        a.sx += static_cast<double>(x);
        a.sy += static_cast<double>(y);
        a.n += 1;
      }
    }
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        const std::int32_t id = instances.at(b, y, x);
        if (id == 0) continue;
        const Acc& a = acc[id];
        const double n = static_cast<double>(a.n);
        out.coords.at(b, 0, y, x) = norm_coord(a.sx / n, W);
        out.coords.at(b, 1, y, x) = norm_coord(a.sy / n, H);
        out.mask.at(b, 0, y, x) = 1.0;
      }
    }
  }
  return out;
}

Tensor diffuse(const Tensor& offsets, int t, SampleMode mode, Tape* tape) {
  const Shape& s = offsets.shape();
  if (s.c != 2) {
    throw ShapeError("offset table needs exactly 2 channels, got " + s.str());
  }
  if (t < 0) throw ConfigError("diffusion step count must be >= 0");
  SampleGrid grid = regular_grid(s.h, s.w, 1);
  // Initial map: the grid replicated per batch element, a constant leaf.
  Tensor map(Shape{s.b, 2, s.h, s.w});
  const std::int64_t per = 2 * s.h * s.w;
  for (std::int64_t b = 0; b < s.b; ++b) {
    std::copy(grid.coords.data(), grid.coords.data() + per, map.data() + b * per);
  }
  for (int i = 0; i < t; ++i) {
    map = guided_sample(map, grid, offsets, mode, tape);
  }
  return map;
}

Tensor instance_loss(const Tensor& pred, const CentroidTargets& targets, InstanceLossKind kind,
                     Tape* tape) {
  const Shape& s = pred.shape();
  if (s.c != 2) throw ShapeError("coordinate map needs exactly 2 channels, got " + s.str());
  if (!(targets.coords.shape() == s) ||
      !(targets.mask.shape() == Shape{s.b, 1, s.h, s.w})) {
    throw ShapeError("instance loss target shapes do not match prediction " + s.str());
  }
  const std::int64_t plane = s.h * s.w;
  const double* pv = pred.data();
  const double* tv = targets.coords.data();
  const double* mv = targets.mask.data();
  std::int64_t labeled = 0;
  double acc = 0.0;
  for (std::int64_t b = 0; b < s.b; ++b) {
    const double* px = pv + (b * 2 + 0) * plane;
    const double* py = pv + (b * 2 + 1) * plane;
    const double* tx = tv + (b * 2 + 0) * plane;
    const double* ty = tv + (b * 2 + 1) * plane;
    const double* m = mv + b * plane;
    for (std::int64_t o = 0; o < plane; ++o) {
      if (m[o] == 0.0) continue;
      ++labeled;
      const double dx = px[o] - tx[o];
      const double dy = py[o] - ty[o];
      switch (kind) {
        case InstanceLossKind::kL2:
          acc += std::sqrt(dx * dx + dy * dy);
          break;
        case InstanceLossKind::kL1:
          acc += std::abs(dx) + std::abs(dy);
          break;
        case InstanceLossKind::kSmoothL1:
          for (double d : {dx, dy}) {
            const double a = std::abs(d);
            acc += a < 1.0 ? 0.5 * d * d : a - 0.5;
          }
          break;
      }
    }
  }
  Tensor loss(Shape{1, 1, 1, 1});
  loss.data()[0] = labeled > 0 ? acc / static_cast<double>(labeled) : 0.0;
  if (tape && pred.requires_grad()) {
    loss.set_requires_grad(true);
    Tensor tc = targets.coords;
    Tensor tm = targets.mask;
    tape->record(
        "instance_loss", {pred, tc, tm}, {loss},
        [pred = pred, tc, tm, loss, kind, labeled, s, plane]() mutable {
          if (labeled == 0) return;
          const double g0 = loss.grad()[0] / static_cast<double>(labeled);
          pred.ensure_grad();
          double* gp = pred.grad();
          const double* pv2 = pred.data();
          const double* tv2 = tc.data();
          const double* mv2 = tm.data();
          for (std::int64_t b = 0; b < s.b; ++b) {
            const std::int64_t bx = (b * 2 + 0) * plane;
            const std::int64_t by = (b * 2 + 1) * plane;
            const double* m = mv2 + b * plane;
            for (std::int64_t o = 0; o < plane; ++o) {
              if (m[o] == 0.0) continue;
              const double dx = pv2[bx + o] - tv2[bx + o];
              const double dy = pv2[by + o] - tv2[by + o];
              double ddx = 0.0, ddy = 0.0;
              switch (kind) {
                case InstanceLossKind::kL2: {
                  const double n = std::sqrt(dx * dx + dy * dy);
                  if (n > 1e-12) {
                    ddx = dx / n;
                    ddy = dy / n;
                  }
                  break;
                }
                case InstanceLossKind::kL1:
                  ddx = dx > 0 ? 1.0 : (dx < 0 ? -1.0 : 0.0);
                  ddy = dy > 0 ? 1.0 : (dy < 0 ? -1.0 : 0.0);
                  break;
                case InstanceLossKind::kSmoothL1:
                  ddx = std::clamp(dx, -1.0, 1.0);
                  ddy = std::clamp(dy, -1.0, 1.0);
                  break;
              }
              gp[bx + o] += g0 * ddx;
              gp[by + o] += g0 * ddy;
            }
          }
        });
  }
  return loss;
}

InstanceLabeling extract_instances(const Tensor& final_map, int area_threshold) {
  const Shape& s = final_map.shape();
  if (s.c != 2) throw ShapeError("coordinate map needs exactly 2 channels, got " + s.str());
  const std::int64_t plane = s.h * s.w;
  InstanceLabeling out;
  out.ids = LabelMap(s.b, s.h, s.w);
  out.areas.resize(static_cast<std::size_t>(s.b));
  const double* v = final_map.data();
  std::vector<std::int64_t> key(static_cast<std::size_t>(plane));
  for (std::int64_t b = 0; b < s.b; ++b) {
    const double* px = v + (b * 2 + 0) * plane;
    const double* py = v + (b * 2 + 1) * plane;
    // Quantize to the integer pixel grid and group on the (x, y) pair.
    std::unordered_map<std::int64_t, std::int64_t> area;
    for (std::int64_t o = 0; o < plane; ++o) {
      const std::int64_t ix = std::clamp<std::int64_t>(
          static_cast<std::int64_t>(std::floor(denorm_coord(px[o], s.w) + 0.5)), 0, s.w - 1);
      const std::int64_t iy = std::clamp<std::int64_t>(
          static_cast<std::int64_t>(std::floor(denorm_coord(py[o], s.h) + 0.5)), 0, s.h - 1);
      const std::int64_t k = iy * s.w + ix;
      key[static_cast<std::size_t>(o)] = k;
      area[k] += 1;
    }
    // Survivors ordered by decreasing area, ties by raster position.
    std::vector<std::pair<std::int64_t, std::int64_t>> kept;  // (key, area)
    for (const auto& [k, a] : area) {
      if (a >= area_threshold) kept.emplace_back(k, a);
    }
    std::sort(kept.begin(), kept.end(), [](const auto& l, const auto& r) {
      return l.second != r.second ? l.second > r.second : l.first < r.first;
    });
    std::unordered_map<std::int64_t, std::int32_t> id_of;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      id_of[kept[i].first] = static_cast<std::int32_t>(i + 1);
      out.areas[static_cast<std::size_t>(b)].push_back(kept[i].second);
    }
    for (std::int64_t o = 0; o < plane; ++o) {
      auto it = id_of.find(key[static_cast<std::size_t>(o)]);
      out.ids.v[static_cast<std::size_t>(b * plane + o)] = it == id_of.end() ? 0 : it->second;
    }
  }
  return out;
}

Tensor upsample_instance_output(const Tensor& lowres_map, const Tensor& lowres_offsets_raw,
                                const IgumConfig& cfg, Tape* tape) {
  if (lowres_map.shape().c != 2) {
    throw ShapeError("coordinate map needs exactly 2 channels, got " + lowres_map.shape().str());
  }
  return igum_forward(lowres_map, lowres_offsets_raw, cfg, tape);
}

}  // namespace wseg

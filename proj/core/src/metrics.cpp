#include "wseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

namespace wseg {

ConfusionMatrix::ConfusionMatrix(int c) : classes(c) {
  if (c < 1) throw ConfigError("confusion matrix needs at least one class");
  counts.assign(static_cast<std::size_t>(c) * c, 0);
}

std::int64_t& ConfusionMatrix::at(int gt, int pred) {
  return counts[static_cast<std::size_t>(gt) * classes + pred];
}

std::int64_t ConfusionMatrix::at(int gt, int pred) const {
  return counts[static_cast<std::size_t>(gt) * classes + pred];
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
}

void ConfusionMatrix::add(const LabelMap& gt, const LabelMap& pred) {
  if (gt.batch != pred.batch || gt.h != pred.h || gt.w != pred.w) {
    throw ShapeError("confusion matrix inputs disagree on resolution");
  }
  for (std::size_t i = 0; i < gt.v.size(); ++i) {
    const std::int32_t g = gt.v[i], p = pred.v[i];
    if (g < 0 || g >= classes || p < 0 || p >= classes) {
      throw UsageError("label outside [0, " + std::to_string(classes) + ")");
    }
    ++at(g, p);
  }
}

void ConfusionMatrix::add_masked(const LabelMap& gt, const LabelMap& pred,
                                 const LabelMap& mask) {
  if (gt.batch != pred.batch || gt.h != pred.h || gt.w != pred.w || gt.batch != mask.batch ||
      gt.h != mask.h || gt.w != mask.w) {
    throw ShapeError("confusion matrix inputs disagree on resolution");
  }
  for (std::size_t i = 0; i < gt.v.size(); ++i) {
    if (mask.v[i] == 0) continue;
    const std::int32_t g = gt.v[i], p = pred.v[i];
    if (g < 0 || g >= classes || p < 0 || p >= classes) {
      throw UsageError("label outside [0, " + std::to_string(classes) + ")");
    }
    ++at(g, p);
  }
}

LabelMap boundary_band(const LabelMap& labels, int radius) {
  if (radius < 0) throw ConfigError("boundary band radius must be >= 0");
  LabelMap band(labels.batch, labels.h, labels.w);
  for (std::int64_t b = 0; b < labels.batch; ++b) {
    for (std::int64_t y = 0; y < labels.h; ++y) {
      for (std::int64_t x = 0; x < labels.w; ++x) {
        const std::int32_t center = labels.at(b, y, x);
        bool mixed = false;
        for (std::int64_t dy = -radius; dy <= radius && !mixed; ++dy) {
          const std::int64_t yy = y + dy;
          if (yy < 0 || yy >= labels.h) continue;
          for (std::int64_t dx = -radius; dx <= radius && !mixed; ++dx) {
            const std::int64_t xx = x + dx;
            if (xx < 0 || xx >= labels.w) continue;
            mixed = labels.at(b, yy, xx) != center;
          }
        }
        band.at(b, y, x) = mixed ? 1 : 0;
      }
    }
  }
  return band;
}

SegScores miou(const ConfusionMatrix& conf) {
  if (conf.classes < 1 || conf.total() == 0) throw UsageError("empty confusion matrix");
  SegScores out;
  std::int64_t trace = 0;
  double iou_sum = 0.0, recall_sum = 0.0;
  int present = 0;
  for (int c = 0; c < conf.classes; ++c) {
    std::int64_t row = 0, col = 0;
    for (int k = 0; k < conf.classes; ++k) {
      row += conf.at(c, k);
      col += conf.at(k, c);
    }
    const std::int64_t tp = conf.at(c, c);
    trace += tp;
    if (row == 0) continue;  // class absent from ground truth
    ++present;
    iou_sum += static_cast<double>(tp) / static_cast<double>(row + col - tp);
    recall_sum += static_cast<double>(tp) / static_cast<double>(row);
  }
  out.miou = iou_sum / present;
  out.class_avg = recall_sum / present;
  out.global_avg = static_cast<double>(trace) / static_cast<double>(conf.total());
  return out;
}

std::vector<double> default_ap_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
  return t;
}

InstanceApAccumulator::InstanceApAccumulator(std::vector<double> thresholds)
    : thresholds_(std::move(thresholds)) {
  if (thresholds_.empty()) throw ConfigError("instance AP needs at least one threshold");
}

void InstanceApAccumulator::add(const LabelMap& pred,
                                const std::vector<std::vector<double>>& confidence,
                                const LabelMap& gt) {
  if (pred.batch != gt.batch || pred.h != gt.h || pred.w != gt.w) {
    throw ShapeError("prediction and ground truth labelings disagree on resolution");
  }
  if (confidence.size() != static_cast<std::size_t>(pred.batch)) {
    throw UsageError("one confidence vector per batch element required");
  }
  const std::int64_t pixels = pred.h * pred.w;
  for (std::int64_t b = 0; b < pred.batch; ++b) {
    std::map<std::int32_t, std::int64_t> parea, garea;
    std::map<std::pair<std::int32_t, std::int32_t>, std::int64_t> inter;
    for (std::int64_t i = 0; i < pixels; ++i) {
      const std::int32_t p = pred.v[static_cast<std::size_t>(b * pixels + i)];
      const std::int32_t g = gt.v[static_cast<std::size_t>(b * pixels + i)];
      if (p > 0) ++parea[p];
      if (g > 0) ++garea[g];
      if (p > 0 && g > 0) ++inter[{p, g}];
    }
    if (!parea.empty() && confidence[static_cast<std::size_t>(b)].size() <
                              static_cast<std::size_t>(parea.rbegin()->first)) {
      throw UsageError("confidence vector shorter than the largest instance id");
    }
    total_gt_ += static_cast<std::int64_t>(garea.size());

    // Detections in descending confidence; ties resolve by id for stability.
    std::vector<std::int32_t> order;
    for (const auto& [id, area] : parea) order.push_back(id);
    std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t c) {
      return confidence[static_cast<std::size_t>(b)][static_cast<std::size_t>(a - 1)] >
             confidence[static_cast<std::size_t>(b)][static_cast<std::size_t>(c - 1)];
    });

    std::vector<Detection> dets;
    for (std::int32_t id : order) {
      Detection d;
      d.confidence = confidence[static_cast<std::size_t>(b)][static_cast<std::size_t>(id - 1)];
      d.matched.assign(thresholds_.size(), false);
      dets.push_back(std::move(d));
    }
    for (std::size_t ti = 0; ti < thresholds_.size(); ++ti) {
      std::map<std::int32_t, bool> taken;
      for (std::size_t di = 0; di < order.size(); ++di) {
        const std::int32_t p = order[di];
        double best_iou = 0.0;
        std::int32_t best_g = 0;
        for (const auto& [gid, area] : garea) {
          if (taken[gid]) continue;
          auto it = inter.find({p, gid});
          if (it == inter.end()) continue;
          const double iou = static_cast<double>(it->second) /
                             static_cast<double>(parea[p] + area - it->second);
          if (iou > best_iou) {
            best_iou = iou;
            best_g = gid;
          }
        }
        if (best_g != 0 && best_iou >= thresholds_[ti]) {
          taken[best_g] = true;
          dets[di].matched[ti] = true;
        }
      }
    }
    for (auto& d : dets) detections_.push_back(std::move(d));
  }
}

ApResult InstanceApAccumulator::result() const {
  ApResult out;
  if (total_gt_ == 0) return out;
  std::vector<std::size_t> rank(detections_.size());
  std::iota(rank.begin(), rank.end(), 0);
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
    return detections_[a].confidence > detections_[b].confidence;
  });
  double ap_sum = 0.0;
  for (std::size_t ti = 0; ti < thresholds_.size(); ++ti) {
    double precision_sum = 0.0;
    std::int64_t tp = 0;
    for (std::size_t k = 0; k < rank.size(); ++k) {
      if (detections_[rank[k]].matched[ti]) {
        ++tp;
        precision_sum += static_cast<double>(tp) / static_cast<double>(k + 1);
      }
    }
    const double ap = precision_sum / static_cast<double>(total_gt_);
    ap_sum += ap;
    if (thresholds_[ti] == 0.5) out.ap50 = ap;
  }
  out.ap = ap_sum / static_cast<double>(thresholds_.size());
  return out;
}

ApResult instance_ap(const InstanceLabeling& pred,
                     const std::vector<std::vector<double>>& confidence, const LabelMap& gt,
                     std::vector<double> thresholds) {
  InstanceApAccumulator acc(std::move(thresholds));
  acc.add(pred.ids, confidence, gt);
  return acc.result();
}

std::vector<std::vector<double>> area_confidences(const InstanceLabeling& labeling) {
  std::vector<std::vector<double>> out;
  for (const auto& areas : labeling.areas) {
    std::vector<double> conf;
    if (!areas.empty()) {
      const double top = static_cast<double>(areas[0]);  // areas sorted descending
      for (std::int64_t a : areas) conf.push_back(static_cast<double>(a) / top);
    }
    out.push_back(std::move(conf));
  }
  return out;
}

MeanShiftResult meanshift_oracle(const Tensor& coords, const Tensor& mask, double bandwidth,
                                 int max_iter) {
  const Shape& cs = coords.shape();
  const Shape& ms = mask.shape();
  if (cs.c != 2 || ms.c != 1 || cs.b != ms.b || cs.h != ms.h || cs.w != ms.w) {
    throw ShapeError("mean shift expects (B,2,H,W) coords with a (B,1,H,W) mask");
  }
  if (bandwidth <= 0.0) throw ConfigError("mean shift bandwidth must be positive");
  if (max_iter < 1) throw ConfigError("mean shift needs at least one iteration");

  MeanShiftResult res;
  res.labeling.ids = LabelMap(cs.b, cs.h, cs.w);
  const double bw2 = bandwidth * bandwidth;
  const double merge2 = 0.25 * bw2;
  const std::int64_t pixels = cs.h * cs.w;
  for (std::int64_t b = 0; b < cs.b; ++b) {
    std::vector<std::int64_t> pix;
    std::vector<double> px, py;
    for (std::int64_t i = 0; i < pixels; ++i) {
      if (mask.data()[b * pixels + i] == 0.0) continue;
      pix.push_back(i);
      px.push_back(coords.data()[(b * 2 + 0) * pixels + i]);
      py.push_back(coords.data()[(b * 2 + 1) * pixels + i]);
    }
    const std::size_t n = pix.size();
    std::vector<double> mx(px), my(py);
    for (std::size_t i = 0; i < n; ++i) {
      for (int it = 0; it < max_iter; ++it) {
        double sx = 0.0, sy = 0.0;
        std::int64_t cnt = 0;
        for (std::size_t j = 0; j < n; ++j) {
          ++res.kernel_evals;
          const double dx = px[j] - mx[i], dy = py[j] - my[i];
          if (dx * dx + dy * dy > bw2) continue;
          sx += px[j];
          sy += py[j];
          ++cnt;
        }
        const double nx = sx / static_cast<double>(cnt);
        const double ny = sy / static_cast<double>(cnt);
        const double shift = (nx - mx[i]) * (nx - mx[i]) + (ny - my[i]) * (ny - my[i]);
        mx[i] = nx;
        my[i] = ny;
        if (shift < 1e-18) break;
      }
    }

    // Merge converged modes, first-seen mode is the cluster representative.
    std::vector<double> cx, cy;
    std::vector<std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < n; ++i) {
      bool joined = false;
      for (std::size_t k = 0; k < cx.size() && !joined; ++k) {
        const double dx = mx[i] - cx[k], dy = my[i] - cy[k];
        if (dx * dx + dy * dy <= merge2) {
          members[k].push_back(i);
          joined = true;
        }
      }
      if (!joined) {
        cx.push_back(mx[i]);
        cy.push_back(my[i]);
        members.push_back({i});
      }
    }
    std::vector<std::size_t> order(members.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) {
      return members[a].size() > members[c].size();
    });
    std::vector<std::int64_t> areas;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      const auto& group = members[order[rank]];
      areas.push_back(static_cast<std::int64_t>(group.size()));
      for (std::size_t i : group) {
        res.labeling.ids.v[static_cast<std::size_t>(b * pixels + pix[i])] =
            static_cast<std::int32_t>(rank + 1);
      }
    }
    res.labeling.areas.push_back(std::move(areas));
  }
  return res;
}

MetricsCsv::MetricsCsv(const std::string& path) : path_(path) {
  std::ofstream f(path_, std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path_ + " for writing");
  f << "epoch,split,miou,class_avg,global_avg,ap,ap50\n";
}

void MetricsCsv::append(int epoch, const std::string& split, const SegScores& seg,
                        const ApResult& ap) {
  std::ofstream f(path_, std::ios::app);
  if (!f) throw FormatError("cannot reopen " + path_);
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,%s,%.6f,%.6f,%.6f,%.6f,%.6f\n", epoch, split.c_str(),
                seg.miou, seg.class_avg, seg.global_avg, ap.ap, ap.ap50);
  f << buf;
}

}  // namespace wseg

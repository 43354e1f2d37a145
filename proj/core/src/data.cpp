#include "wseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "wseg/util.hpp"

namespace wseg {

namespace {

struct Box {
  std::int64_t x0, y0, x1, y1;  // inclusive
};

bool boxes_too_close(const Box& a, const Box& b, std::int64_t gap) {
  return a.x0 <= b.x1 + gap && b.x0 <= a.x1 + gap && a.y0 <= b.y1 + gap && b.y0 <= a.y1 + gap;
}

double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

Dataset synth_generate(std::uint64_t seed, int count, std::int64_t h, std::int64_t w,
                       int max_shapes) {
  if (h < 32 || w < 32) throw ConfigError("synthetic scenes need at least 32x32 pixels");
  if (max_shapes < 1) throw ConfigError("max_shapes must be >= 1");
  if (count < 0) throw ConfigError("sample count must be >= 0");
  // Shapes span a few texels of a factor-8 feature map so that coarse logits
  // can represent every instance while its boundary detail still depends on
  // guided upsampling.
  const std::int64_t min_dim = std::min(h, w);
  const std::int64_t rect_lo = std::max<std::int64_t>(10, min_dim / 5);
  const std::int64_t rect_hi = min_dim * 2 / 5;
  const std::int64_t rad_lo = std::max<std::int64_t>(6, min_dim / 9);
  const std::int64_t rad_hi = min_dim / 5;
  constexpr int kTries = 200;
  constexpr std::int64_t kGap = 3;

  Dataset ds;
  ds.seed = seed;
  ds.samples.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, 1000 + static_cast<std::uint64_t>(i)));
    Sample s;
    s.image = Tensor(Shape{1, 3, h, w});
    s.semantic = LabelMap(1, h, w);
    s.instance = LabelMap(1, h, w);

    double bg[3];
    for (double& c : bg) c = quantize8(rng.uniform(0.05, 0.35));
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t p = 0; p < h * w; ++p) {
        s.image.data()[c * h * w + p] = quantize8(bg[c] + rng.uniform(-0.02, 0.02));
      }
    }

    const int n_shapes = static_cast<int>(rng.uniform_int(1, max_shapes));
    // An early shape can land where it walls off the rest of the canvas, so a
    // stuck arrangement is redrawn from scratch before giving up. Painting is
    // deferred until the whole arrangement fits.
    struct Placement {
      bool is_rect;
      Box box;
      std::int64_t cx, cy, radius;
    };
    std::vector<Placement> scene;
    bool scene_ok = false;
    for (int round = 0; round < kRounds && !scene_ok; ++round) {
      scene.clear();
      std::vector<Box> placed;
      scene_ok = true;
      for (int k = 0; k < n_shapes && scene_ok; ++k) {
        const bool is_rect = rng.uniform() < 0.5;
        bool ok = false;
        for (int attempt = 0; attempt < kTries && !ok; ++attempt) {
          // Crowded scenes anneal the draw toward the minimum size so small
          // gaps stay usable.
          const double keep = std::max(0.0, 1.0 - 2.0 * attempt / kTries);
          const auto hi_eff = [keep](std::int64_t lo, std::int64_t hi) {
            return lo +
                   static_cast<std::int64_t>(std::llround(keep * static_cast<double>(hi - lo)));
          };
          Placement p{is_rect, Box{}, 0, 0, 0};
          if (is_rect) {
            const std::int64_t bw = rng.uniform_int(rect_lo, hi_eff(rect_lo, rect_hi));
            const std::int64_t bh = rng.uniform_int(rect_lo, hi_eff(rect_lo, rect_hi));
            p.box.x0 = rng.uniform_int(1, w - bw - 1);
            p.box.y0 = rng.uniform_int(1, h - bh - 1);
            p.box.x1 = p.box.x0 + bw - 1;
            p.box.y1 = p.box.y0 + bh - 1;
          } else {
            p.radius = rng.uniform_int(rad_lo, hi_eff(rad_lo, rad_hi));
            p.cx = rng.uniform_int(p.radius + 1, w - p.radius - 2);
            p.cy = rng.uniform_int(p.radius + 1, h - p.radius - 2);
            p.box = Box{p.cx - p.radius, p.cy - p.radius, p.cx + p.radius, p.cy + p.radius};
          }
          bool clash = false;
          for (const Box& other : placed) clash = clash || boxes_too_close(p.box, other, kGap);
          if (clash) continue;
          placed.push_back(p.box);
          scene.push_back(p);
          ok = true;
        }
        scene_ok = ok;
      }
    }
    if (!scene_ok) {
      throw GenerationError("sample " + std::to_string(i) + ": no room for " +
                            std::to_string(n_shapes) + " shapes");
    }

    for (std::size_t k = 0; k < scene.size(); ++k) {
      const Placement& p = scene[k];
      const int id = static_cast<int>(k) + 1;
      const int cls = p.is_rect ? 1 : 2;
      double color[3];
      for (double& c : color) c = quantize8(rng.uniform(0.45, 1.0));
      for (std::int64_t y = p.box.y0; y <= p.box.y1; ++y) {
        for (std::int64_t x = p.box.x0; x <= p.box.x1; ++x) {
          if (!p.is_rect) {
            const std::int64_t dx = x - p.cx, dy = y - p.cy;
            if (dx * dx + dy * dy > p.radius * p.radius) continue;
          }
          s.semantic.at(0, y, x) = cls;
          s.instance.at(0, y, x) = id;
          for (std::int64_t c = 0; c < 3; ++c) {
            s.image.at(0, c, y, x) = quantize8(color[c] + rng.uniform(-0.02, 0.02));
          }
        }
      }
      InstanceMeta meta;
      meta.id = id;
      meta.semantic_class = cls;
      if (p.is_rect) {
        meta.cx = 0.5 * static_cast<double>(p.box.x0 + p.box.x1);
        meta.cy = 0.5 * static_cast<double>(p.box.y0 + p.box.y1);
      } else {
        meta.cx = static_cast<double>(p.cx);
        meta.cy = static_cast<double>(p.cy);
      }
      s.instances.push_back(meta);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

namespace {

// PNM header tokenizer: whitespace separates tokens, # starts a comment that
// runs to the end of line.
int pnm_int(std::istream& in, const std::string& path) {
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c)) throw FormatError(path + ": malformed PNM header");
  std::int64_t v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1 << 30) throw FormatError(path + ": PNM header value out of range");
    c = in.get();
  }
  if (c == EOF) throw FormatError(path + ": truncated PNM header");
  return static_cast<int>(v);
}

std::string pnm_magic(std::istream& in, const std::string& path) {
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (!in) throw FormatError(path + ": truncated PNM header");
  return magic;
}

void read_raster(std::istream& in, const std::string& path, std::string& out, std::size_t n) {
  out.resize(n);
  in.read(out.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError(path + ": truncated raster");
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  const Shape& s = image.shape();
  if (s.b != 1 || s.c != 3) throw ShapeError("PPM writer expects a (1,3,H,W) image, got " + s.str());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f << "P6\n" << s.w << " " << s.h << "\n255\n";
  std::string raster;
  raster.reserve(static_cast<std::size_t>(3 * s.h * s.w));
  for (std::int64_t y = 0; y < s.h; ++y) {
    for (std::int64_t x = 0; x < s.w; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(0, c, y, x), 0.0, 1.0);
        raster.push_back(static_cast<char>(static_cast<int>(std::lround(v * 255.0))));
      }
    }
  }
  f.write(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (!f) throw FormatError("short write to " + path);
}

Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  if (pnm_magic(f, path) != "P6") throw FormatError(path + ": not a binary PPM");
  const int w = pnm_int(f, path);
  const int h = pnm_int(f, path);
  const int maxval = pnm_int(f, path);
  if (maxval != 255) throw FormatError(path + ": PPM maxval must be 255");
  std::string raster;
  read_raster(f, path, raster, static_cast<std::size_t>(3) * w * h);
  Tensor img(Shape{1, 3, h, w});
  std::size_t i = 0;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) {
        img.at(0, c, y, x) = static_cast<double>(static_cast<unsigned char>(raster[i++])) / 255.0;
      }
    }
  }
  return img;
}

void write_pgm(const std::string& path, const LabelMap& labels, int maxval) {
  if (labels.batch != 1) throw ShapeError("PGM writer expects a single-image label map");
  if (maxval != 255 && maxval != 65535) throw ConfigError("PGM maxval must be 255 or 65535");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f << "P5\n" << labels.w << " " << labels.h << "\n" << maxval << "\n";
  std::string raster;
  for (std::int32_t v : labels.v) {
    if (v < 0 || v > maxval) {
      throw UsageError(path + ": label " + std::to_string(v) + " does not fit maxval " +
                       std::to_string(maxval));
    }
    if (maxval == 255) {
      raster.push_back(static_cast<char>(v));
    } else {
      raster.push_back(static_cast<char>((v >> 8) & 0xff));  // big-endian
      raster.push_back(static_cast<char>(v & 0xff));
    }
  }
  f.write(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (!f) throw FormatError("short write to " + path);
}

LabelMap read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  if (pnm_magic(f, path) != "P5") throw FormatError(path + ": not a binary PGM");
  const int w = pnm_int(f, path);
  const int h = pnm_int(f, path);
  const int maxval = pnm_int(f, path);
  if (maxval != 255 && maxval != 65535) throw FormatError(path + ": PGM maxval must be 255 or 65535");
  const int bytes = maxval == 255 ? 1 : 2;
  std::string raster;
  read_raster(f, path, raster, static_cast<std::size_t>(bytes) * w * h);
  LabelMap labels(1, h, w);
  for (std::size_t p = 0; p < labels.v.size(); ++p) {
    if (bytes == 1) {
      labels.v[p] = static_cast<unsigned char>(raster[p]);
    } else {
      labels.v[p] = static_cast<std::int32_t>(static_cast<unsigned char>(raster[2 * p])) << 8 |
                    static_cast<std::int32_t>(static_cast<unsigned char>(raster[2 * p + 1]));
    }
  }
  return labels;
}

namespace {

std::string indexed_name(const char* stem, int i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05d.%s", stem, i, ext);
  return buf;
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    const int n = static_cast<int>(i);
    write_ppm((fs::path(dir) / indexed_name("img", n, "ppm")).string(), s.image);
    write_pgm((fs::path(dir) / indexed_name("sem", n, "pgm")).string(), s.semantic, 255);
    write_pgm((fs::path(dir) / indexed_name("inst", n, "pgm")).string(), s.instance, 65535);
  }
  std::ofstream meta((fs::path(dir) / "meta.txt").string(), std::ios::trunc);
  if (!meta) throw FormatError("cannot write " + dir + "/meta.txt");
  meta << "count=" << ds.samples.size() << "\n";
  meta << "classes=" << ds.classes << "\n";
  meta << "thing_classes=";
  for (std::size_t i = 0; i < ds.thing_classes.size(); ++i) {
    meta << (i ? "," : "") << ds.thing_classes[i];
  }
  meta << "\n";
  meta << "seed=" << ds.seed << "\n";
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream meta((fs::path(dir) / "meta.txt").string());
  if (!meta) throw FormatError("cannot open " + dir + "/meta.txt");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(dir + "/meta.txt: expected key=value, got " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const char* key : {"count", "classes", "thing_classes", "seed"}) {
    if (!kv.count(key)) throw FormatError(dir + "/meta.txt: missing " + std::string(key));
  }
  if (kv.size() != 4) throw FormatError(dir + "/meta.txt: unknown keys present");

  Dataset ds;
  const int count = std::stoi(kv["count"]);
  ds.classes = std::stoi(kv["classes"]);
  ds.seed = std::stoull(kv["seed"]);
  ds.thing_classes.clear();
  std::stringstream tc(kv["thing_classes"]);
  std::string item;
  while (std::getline(tc, item, ',')) {
    if (!item.empty()) ds.thing_classes.push_back(std::stoi(item));
  }
  ds.samples.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Sample s;
    s.image = read_ppm((fs::path(dir) / indexed_name("img", i, "ppm")).string());
    s.semantic = read_pgm((fs::path(dir) / indexed_name("sem", i, "pgm")).string());
    s.instance = read_pgm((fs::path(dir) / indexed_name("inst", i, "pgm")).string());
    const Shape& is = s.image.shape();
    if (s.semantic.h != is.h || s.semantic.w != is.w || s.instance.h != is.h ||
        s.instance.w != is.w) {
      throw FormatError(dir + ": sample " + std::to_string(i) + " parts disagree on resolution");
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

namespace {

void check_batch_indices(const Dataset& ds, const std::vector<int>& indices) {
  if (indices.empty()) throw UsageError("empty minibatch");
  for (int i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= ds.samples.size()) {
      throw UsageError("sample index " + std::to_string(i) + " outside dataset of " +
                       std::to_string(ds.samples.size()));
    }
  }
}

}  // namespace

Tensor stack_images(const Dataset& ds, const std::vector<int>& indices) {
  check_batch_indices(ds, indices);
  const Shape& s0 = ds.samples[static_cast<std::size_t>(indices[0])].image.shape();
  Tensor out(Shape{static_cast<std::int64_t>(indices.size()), 3, s0.h, s0.w});
  const std::int64_t per = 3 * s0.h * s0.w;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor& img = ds.samples[static_cast<std::size_t>(indices[b])].image;
    if (!(img.shape() == s0)) throw ShapeError("minibatch mixes image resolutions");
    std::copy(img.data(), img.data() + per, out.data() + static_cast<std::int64_t>(b) * per);
  }
  return out;
}

namespace {

LabelMap stack_maps(const Dataset& ds, const std::vector<int>& indices, bool semantic) {
  check_batch_indices(ds, indices);
  const Sample& s0 = ds.samples[static_cast<std::size_t>(indices[0])];
  const std::int64_t h = s0.semantic.h, w = s0.semantic.w;
  LabelMap out(static_cast<std::int64_t>(indices.size()), h, w);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Sample& s = ds.samples[static_cast<std::size_t>(indices[b])];
    const LabelMap& src = semantic ? s.semantic : s.instance;
    if (src.h != h || src.w != w) throw ShapeError("minibatch mixes label resolutions");
    std::copy(src.v.begin(), src.v.end(), out.v.begin() + static_cast<std::int64_t>(b) * h * w);
  }
  return out;
}

}  // namespace

LabelMap stack_semantic(const Dataset& ds, const std::vector<int>& indices) {
  return stack_maps(ds, indices, true);
}

LabelMap stack_instance(const Dataset& ds, const std::vector<int>& indices) {
  return stack_maps(ds, indices, false);
}

LabelMap downsample_labels(const LabelMap& labels, int factor) {
  if (factor < 1) throw ConfigError("downsample factor must be >= 1");
  if (labels.h % factor != 0 || labels.w % factor != 0) {
    throw ShapeError("label dims must be divisible by the downsample factor");
  }
  const std::int64_t oh = labels.h / factor, ow = labels.w / factor;
  LabelMap out(labels.batch, oh, ow);
  for (std::int64_t b = 0; b < labels.batch; ++b) {
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t x = 0; x < ow; ++x) {
        out.at(b, y, x) = labels.at(b, y * factor + factor / 2, x * factor + factor / 2);
      }
    }
  }
  return out;
}

}  // namespace wseg

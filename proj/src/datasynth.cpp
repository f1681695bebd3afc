#include "dpnet/datasynth.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dpnet {
namespace {

namespace fs = std::filesystem;

constexpr const char* kSplits[3] = {"train", "val", "test"};

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const char* what) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw DataError(std::string("manifest: bad ") + what + " '" + s + "'");
  return v;
}

std::string sample_name(size_t idx) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05zu", idx);
  return buf;
}

// Smooth low-frequency background: bilinear interpolation of a coarse random
// control grid per channel.
void fill_background(Tensor& img, Rng& rng) {
  const size_t H = img.shape()[1], W = img.shape()[2];
  constexpr size_t G = 6;
  double ctrl[3][G * G];
  for (size_t c = 0; c < 3; ++c)
    for (size_t i = 0; i < G * G; ++i) ctrl[c][i] = rng.uniform(0.10, 0.50);
  double* v = img.values_mut().data();
  for (size_t y = 0; y < H; ++y)
    for (size_t x = 0; x < W; ++x) {
      const double gy = std::min(
          static_cast<double>(G - 1),
          std::max(0.0, (y + 0.5) / static_cast<double>(H) * G - 0.5));
      const double gx = std::min(
          static_cast<double>(G - 1),
          std::max(0.0, (x + 0.5) / static_cast<double>(W) * G - 0.5));
      const size_t y0 = static_cast<size_t>(gy), x0 = static_cast<size_t>(gx);
      const size_t y1 = std::min(y0 + 1, G - 1), x1 = std::min(x0 + 1, G - 1);
      const double fy = gy - static_cast<double>(y0);
      const double fx = gx - static_cast<double>(x0);
      for (size_t c = 0; c < 3; ++c) {
        const double top =
            ctrl[c][y0 * G + x0] * (1 - fx) + ctrl[c][y0 * G + x1] * fx;
        const double bot =
            ctrl[c][y1 * G + x0] * (1 - fx) + ctrl[c][y1 * G + x1] * fx;
        v[(c * H + y) * W + x] = top * (1 - fy) + bot * fy;
      }
    }
}

struct PlacedObject {
  int class_id;
  Box box;
  std::array<double, 3> color;
};

// One attempt at a full scene; returns false when an object cannot be placed
// within the overlap budget.
bool try_scene(const SynthParams& p, Rng& rng, Scene& out) {
  const size_t H = p.image_size, W = p.image_size;
  out.reference = Tensor::zeros({3, H, W});
  out.anns.clear();
  fill_background(out.reference, rng);

  const size_t span = p.max_objects - p.min_objects + 1;
  const size_t count = p.min_objects + rng.uniform_index(span);
  const size_t side_min = std::max<size_t>(6, H / 6);
  const size_t side_max = std::max(side_min + 2, 3 * H / 8);
  std::vector<PlacedObject> objs;
  for (size_t oi = 0; oi < count; ++oi) {
    PlacedObject o;
    o.class_id = static_cast<int>(rng.uniform_index(p.num_classes));
    const size_t shape_kind = static_cast<size_t>(o.class_id) % 3;
    size_t bw = side_min + rng.uniform_index(side_max - side_min + 1);
    size_t bh = shape_kind == 2
                    ? side_min + rng.uniform_index(side_max - side_min + 1)
                    : bw;  // circles and squares get square boxes
    const size_t dom = rng.uniform_index(3);
    for (size_t c = 0; c < 3; ++c)
      o.color[c] = c == dom ? rng.uniform(0.65, 0.95) : rng.uniform(0.05, 0.35);

    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const size_t x0 = 1 + rng.uniform_index(W - bw - 1);
      const size_t y0 = 1 + rng.uniform_index(H - bh - 1);
      Box b{static_cast<double>(x0), static_cast<double>(y0),
            static_cast<double>(x0 + bw), static_cast<double>(y0 + bh)};
      bool ok = true;
      for (const auto& prev : objs)
        if (box_iou(b, prev.box) > 0.3) {
          ok = false;
          break;
        }
      if (ok) {
        o.box = b;
        placed = true;
      }
    }
    if (!placed) return false;
    objs.push_back(o);
  }

  const size_t hw = H * W;
  double* v = out.reference.values_mut().data();
  for (const auto& o : objs) {
    auto mask = rasterize_shape(o.class_id, o.box, H, W);
    for (size_t y = 0; y < H; ++y)
      for (size_t x = 0; x < W; ++x)
        if (mask[y * W + x])
          for (size_t c = 0; c < 3; ++c) v[c * hw + y * W + x] = o.color[c];
    out.anns.push_back({o.class_id, o.box});
  }
  // Mild pixel noise textures both background and shapes.
  for (size_t i = 0; i < 3 * hw; ++i)
    v[i] = std::min(1.0, std::max(0.0, v[i] + rng.uniform(-0.02, 0.02)));
  return true;
}

void write_split_dirs(const std::string& root) {
  for (const char* split : kSplits)
    for (const char* sub : {"degraded", "reference", "annotations"})
      fs::create_directories(fs::path(root) / split / sub);
}

}  // namespace

SynthParams SynthParams::from_config(const Config& cfg) {
  SynthParams p;
  p.image_size = static_cast<size_t>(cfg.get_int("data.image_size"));
  p.train_count = static_cast<size_t>(cfg.get_int("data.train_count"));
  p.val_count = static_cast<size_t>(cfg.get_int("data.val_count"));
  p.test_count = static_cast<size_t>(cfg.get_int("data.test_count"));
  p.seed = static_cast<std::uint64_t>(cfg.get_int("data.seed"));
  p.min_objects = static_cast<size_t>(cfg.get_int("data.min_objects"));
  p.max_objects = static_cast<size_t>(cfg.get_int("data.max_objects"));
  if (p.min_objects > p.max_objects)
    throw ConfigError("data.min_objects exceeds data.max_objects");
  p.num_classes = static_cast<size_t>(cfg.get_int("model.num_classes"));
  p.cast_preset = cfg.get_string("data.cast_preset");
  auto range = [&](const char* key) {
    auto v = cfg.get_doubles(key);
    return std::array<double, 2>{v[0], v[1]};
  };
  p.depth_range = range("data.depth_range");
  p.transmission_range = range("data.transmission_range");
  p.airlight_range = range("data.airlight_range");
  p.vignette_range = range("data.vignette_range");
  p.highlight_range = range("data.highlight_intensity_range");
  p.highlight_prob = cfg.get_double("data.highlight_prob");
  p.per_pixel_transmission = cfg.get_bool("data.per_pixel_transmission");
  const size_t side_min = std::max<size_t>(6, p.image_size / 6);
  if (p.image_size < 4 * side_min)
    throw ConfigError("data.image_size too small for object placement");
  return p;
}

std::vector<bool> rasterize_shape(int class_id, const Box& box, size_t H,
                                  size_t W) {
  std::vector<bool> mask(H * W, false);
  const size_t kind = static_cast<size_t>(class_id) % 3;
  const double cx = (box.x0 + box.x1) / 2, cy = (box.y0 + box.y1) / 2;
  const size_t y_lo = static_cast<size_t>(std::max(0.0, std::floor(box.y0)));
  const size_t y_hi =
      std::min(H, static_cast<size_t>(std::max(0.0, std::ceil(box.y1))));
  const size_t x_lo = static_cast<size_t>(std::max(0.0, std::floor(box.x0)));
  const size_t x_hi =
      std::min(W, static_cast<size_t>(std::max(0.0, std::ceil(box.x1))));
  for (size_t y = y_lo; y < y_hi; ++y)
    for (size_t x = x_lo; x < x_hi; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool in = false;
      if (kind == 0) {  // circle inscribed in the (square) box
        const double r = std::min(box.width(), box.height()) / 2;
        in = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
      } else if (kind == 1) {  // square fills the box
        in = px >= box.x0 && px < box.x1 && py >= box.y0 && py < box.y1;
      } else {  // upright isoceles triangle: apex top-center, base bottom
        if (py >= box.y0 && py < box.y1 && px >= box.x0 && px < box.x1) {
          const double f = (py - box.y0) / box.height();  // 0 apex, 1 base
          const double half = f * box.width() / 2;
          in = std::fabs(px - cx) <= half;
        }
      }
      if (in) mask[y * W + x] = true;
    }
  return mask;
}

Scene generate_scene(const SynthParams& p, Rng& rng) {
  Scene s;
  for (int restart = 0; restart < 100; ++restart)
    if (try_scene(p, rng, s)) return s;
  throw DataError("generate_scene: could not place objects in 100 attempts");
}

DegradationParams sample_degradation(const SynthParams& p, Rng& rng) {
  DegradationParams d;
  if (p.cast_preset == "bluish")
    d.bluish = 1;
  else if (p.cast_preset == "greenish")
    d.bluish = 0;
  else
    d.bluish = rng.uniform() < 0.5 ? 1 : 0;
  // Red always attenuates fastest; the surviving channel has the smallest
  // coefficient. Non-overlapping ranges enforce the ordering.
  const double b_strong = rng.uniform(0.9, 1.3);
  const double b_mid = rng.uniform(0.4, 0.7);
  const double b_weak = rng.uniform(0.1, 0.3);
  d.beta[0] = b_strong;
  d.beta[1] = d.bluish ? b_mid : b_weak;
  d.beta[2] = d.bluish ? b_weak : b_mid;
  d.depth = rng.uniform(p.depth_range[0], p.depth_range[1]);
  d.transmission =
      rng.uniform(p.transmission_range[0], p.transmission_range[1]);
  d.airlight = rng.uniform(p.airlight_range[0], p.airlight_range[1]);
  d.vignette = rng.uniform(p.vignette_range[0], p.vignette_range[1]);
  const double hp = rng.uniform();
  const double hi = rng.uniform(p.highlight_range[0], p.highlight_range[1]);
  const double hx = rng.uniform(0.0, static_cast<double>(p.image_size));
  const double hy = rng.uniform(0.0, static_cast<double>(p.image_size));
  const double hs = rng.uniform(p.image_size / 6.0, p.image_size / 3.0);
  if (hp < p.highlight_prob) {
    d.highlight = hi;
    d.hl_cx = hx;
    d.hl_cy = hy;
    d.hl_sigma = hs;
  }
  d.per_pixel_transmission = p.per_pixel_transmission;
  return d;
}

Tensor apply_degradation(const Tensor& reference,
                         const DegradationParams& d) {
  const auto& s = reference.shape();
  if (s.size() != 3 || s[0] != 3)
    throw ShapeError("apply_degradation: expected a [3,H,W] image");
  if (d.transmission <= 0 || d.transmission > 1)
    throw DataError("apply_degradation: transmission must be in (0,1]");
  if (d.depth < 0) throw DataError("apply_degradation: negative depth");
  const size_t H = s[1], W = s[2], hw = H * W;
  Tensor out = make_tensor(s, reference.values());
  double* v = out.values_mut().data();

  // 1. Wavelength-dependent color cast. depth == 0 leaves the image intact.
  double att[3], air[3];
  for (size_t c = 0; c < 3; ++c) {
    att[c] = std::exp(-d.beta[c] * d.depth);
    air[c] = d.airlight * std::exp(-d.beta[c] * d.depth / 2);
  }
  for (size_t c = 0; c < 3; ++c)
    for (size_t i = 0; i < hw; ++i) v[c * hw + i] *= att[c];

  // 2. Haze blend toward the (water-tinted) airlight.
  for (size_t y = 0; y < H; ++y) {
    double t = d.transmission;
    if (d.per_pixel_transmission) {
      const double f =
          H > 1 ? static_cast<double>(y) / static_cast<double>(H - 1) : 0.0;
      t = std::min(1.0, std::max(1e-3, d.transmission + 0.15 * (0.5 - f)));
    }
    for (size_t x = 0; x < W; ++x)
      for (size_t c = 0; c < 3; ++c) {
        double& px = v[(c * H + y) * W + x];
        px = px * t + air[c] * (1 - t);
      }
  }

  // 3. Lighting: quadratic vignette (center untouched, corners scaled by
  // exactly 1-v) plus an optional additive Gaussian highlight.
  const double ccx = (W - 1) / 2.0, ccy = (H - 1) / 2.0;
  const double rmax2 = ccx * ccx + ccy * ccy;
  for (size_t y = 0; y < H; ++y)
    for (size_t x = 0; x < W; ++x) {
      const double dx = x - ccx, dy = y - ccy;
      const double fall =
          rmax2 > 0 ? 1.0 - d.vignette * (dx * dx + dy * dy) / rmax2 : 1.0;
      double glow = 0;
      if (d.highlight > 0) {
        const double gx = x - d.hl_cx, gy = y - d.hl_cy;
        glow = d.highlight *
               std::exp(-(gx * gx + gy * gy) / (2 * d.hl_sigma * d.hl_sigma));
      }
      for (size_t c = 0; c < 3; ++c) {
        double& px = v[(c * H + y) * W + x];
        px = std::min(1.0, std::max(0.0, px * fall + glow));
      }
    }
  return out;
}

void synthesize_dataset(const SynthParams& p, const std::string& root,
                        bool overwrite) {
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!overwrite)
      throw DataError("output directory '" + root +
                      "' is not empty (pass the overwrite flag to replace it)");
    fs::remove_all(root);
  }
  write_split_dirs(root);

  std::string manifest =
      "split\tindex\tseed\tbluish\tbeta_r\tbeta_g\tbeta_b\tdepth\t"
      "transmission\tairlight\tvignette\thighlight\thl_cx\thl_cy\thl_sigma\t"
      "per_pixel_t\tn_objects\n";
  const size_t counts[3] = {p.train_count, p.val_count, p.test_count};
  for (size_t si = 0; si < 3; ++si) {
    for (size_t i = 0; i < counts[si]; ++i) {
      const std::uint64_t child = Rng::derive(p.seed, si, i);
      Rng rng(child);
      Scene scene = generate_scene(p, rng);
      DegradationParams d = sample_degradation(p, rng);
      // Snap the reference to the 8-bit grid it will be stored on before
      // degrading, so replaying the manifest from the stored reference file
      // reproduces the degraded file bitwise.
      {
        double* rv = scene.reference.values_mut().data();
        for (size_t k = 0; k < scene.reference.numel(); ++k)
          rv[k] = std::nearbyint(std::min(1.0, std::max(0.0, rv[k])) * 255.0) /
                  255.0;
      }
      Tensor degraded = apply_degradation(scene.reference, d);

      const fs::path base = fs::path(root) / kSplits[si];
      const std::string name = sample_name(i);
      write_ppm((base / "reference" / (name + ".ppm")).string(),
                scene.reference);
      write_ppm((base / "degraded" / (name + ".ppm")).string(), degraded);
      write_annotations((base / "annotations" / (name + ".txt")).string(),
                        scene.anns);

      std::ostringstream row;
      char seedbuf[32];
      std::snprintf(seedbuf, sizeof(seedbuf), "%016llx",
                    static_cast<unsigned long long>(child));
      row << kSplits[si] << '\t' << name << '\t' << seedbuf << '\t'
          << d.bluish << '\t' << fmt(d.beta[0]) << '\t' << fmt(d.beta[1])
          << '\t' << fmt(d.beta[2]) << '\t' << fmt(d.depth) << '\t'
          << fmt(d.transmission) << '\t' << fmt(d.airlight) << '\t'
          << fmt(d.vignette) << '\t' << fmt(d.highlight) << '\t'
          << fmt(d.hl_cx) << '\t' << fmt(d.hl_cy) << '\t' << fmt(d.hl_sigma)
          << '\t' << (d.per_pixel_transmission ? 1 : 0) << '\t'
          << scene.anns.size() << '\n';
      manifest += row.str();
    }
  }
  atomic_write((fs::path(root) / "manifest.tsv").string(), manifest);
}

size_t verify_manifest_replay(const std::string& root) {
  std::ifstream in(fs::path(root) / "manifest.tsv");
  if (!in) throw DataError("cannot open manifest in '" + root + "'");
  std::string line;
  if (!std::getline(in, line))
    throw DataError("manifest in '" + root + "' is empty");
  size_t checked = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::string cur;
    for (char ch : line) {
      if (ch == '\t') {
        cols.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    cols.push_back(cur);
    if (cols.size() != 17)
      throw DataError("manifest row with " + std::to_string(cols.size()) +
                      " columns (expected 17)");
    DegradationParams d;
    d.bluish = cols[3] == "1";
    d.beta = {parse_double(cols[4], "beta_r"), parse_double(cols[5], "beta_g"),
              parse_double(cols[6], "beta_b")};
    d.depth = parse_double(cols[7], "depth");
    d.transmission = parse_double(cols[8], "transmission");
    d.airlight = parse_double(cols[9], "airlight");
    d.vignette = parse_double(cols[10], "vignette");
    d.highlight = parse_double(cols[11], "highlight");
    d.hl_cx = parse_double(cols[12], "hl_cx");
    d.hl_cy = parse_double(cols[13], "hl_cy");
    d.hl_sigma = parse_double(cols[14], "hl_sigma");
    d.per_pixel_transmission = cols[15] == "1";

    const fs::path base = fs::path(root) / cols[0];
    Tensor ref = read_ppm((base / "reference" / (cols[1] + ".ppm")).string());
    const std::string expect =
        read_file_bytes((base / "degraded" / (cols[1] + ".ppm")).string());
    const std::string got = encode_ppm(apply_degradation(ref, d));
    if (got != expect)
      throw DataError("manifest replay mismatch for " + cols[0] + "/" +
                      cols[1]);
    ++checked;
  }
  return checked;
}

}  // namespace dpnet

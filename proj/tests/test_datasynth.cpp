#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dpnet/datasynth.hpp"
#include "dpnet/metrics.hpp"

using namespace dpnet;
namespace fs = std::filesystem;

namespace {

SynthParams tiny_params() {
  SynthParams p;
  p.image_size = 48;
  p.train_count = 6;
  p.val_count = 2;
  p.test_count = 2;
  p.seed = 5;
  return p;
}

fs::path fresh_dir(const std::string& name) {
  fs::path root = fs::temp_directory_path() / "dpnet_synth_tests" / name;
  fs::remove_all(root);
  return root;
}

std::string slurp(const fs::path& p) { return read_file_bytes(p.string()); }

}  // namespace

TEST_CASE("same seed produces byte-identical dataset trees") {
  SynthParams p = tiny_params();
  fs::path a = fresh_dir("tree_a"), b = fresh_dir("tree_b");
  synthesize_dataset(p, a.string(), false);
  synthesize_dataset(p, b.string(), false);
  CHECK(slurp(a / "manifest.tsv") == slurp(b / "manifest.tsv"));
  const char* splits[3] = {"train", "val", "test"};
  const size_t counts[3] = {p.train_count, p.val_count, p.test_count};
  for (size_t s = 0; s < 3; ++s)
    for (size_t i = 0; i < counts[s]; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%05zu", i);
      for (const char* sub : {"degraded", "reference"}) {
        fs::path rel = fs::path(splits[s]) / sub / (std::string(name) + ".ppm");
        CHECK(slurp(a / rel) == slurp(b / rel));
      }
      fs::path ann =
          fs::path(splits[s]) / "annotations" / (std::string(name) + ".txt");
      CHECK(slurp(a / ann) == slurp(b / ann));
    }

  // A different seed must change the content.
  SynthParams q = p;
  q.seed = 6;
  fs::path c = fresh_dir("tree_c");
  synthesize_dataset(q, c.string(), false);
  CHECK(slurp(a / "manifest.tsv") != slurp(c / "manifest.tsv"));
}

TEST_CASE("manifest replay verifies and detects tampering") {
  SynthParams p = tiny_params();
  fs::path root = fresh_dir("replay");
  synthesize_dataset(p, root.string(), false);
  CHECK(verify_manifest_replay(root.string()) ==
        p.train_count + p.val_count + p.test_count);

  // Flip one payload byte in a degraded image: replay must notice.
  fs::path victim = root / "train" / "degraded" / "00001.ppm";
  std::string bytes = slurp(victim);
  bytes[bytes.size() - 1] = static_cast<char>(bytes[bytes.size() - 1] ^ 0x01);
  atomic_write(victim.string(), bytes);
  CHECK_THROWS_AS(verify_manifest_replay(root.string()), DataError);
  CHECK_THROWS_AS(verify_manifest_replay("/nonexistent/nowhere"), DataError);
}

TEST_CASE("synthesis refuses a non-empty output directory unless overwritten") {
  SynthParams p = tiny_params();
  p.train_count = 1;
  p.val_count = 1;
  p.test_count = 1;
  fs::path root = fresh_dir("refuse");
  synthesize_dataset(p, root.string(), false);
  CHECK_THROWS_AS(synthesize_dataset(p, root.string(), false), DataError);
  CHECK_NOTHROW(synthesize_dataset(p, root.string(), true));
  CHECK(verify_manifest_replay(root.string()) == 3);
}

TEST_CASE("rasterized shapes cover a healthy fraction of their boxes") {
  const size_t H = 40, W = 40;
  const Box box{8, 8, 28, 28};
  const double area = box.area();
  for (int cls = 0; cls < 3; ++cls) {
    auto mask = rasterize_shape(cls, box, H, W);
    size_t on = 0, outside = 0;
    for (size_t y = 0; y < H; ++y)
      for (size_t x = 0; x < W; ++x) {
        if (!mask[y * W + x]) continue;
        ++on;
        const double px = x + 0.5, py = y + 0.5;
        if (px < box.x0 || px > box.x1 || py < box.y0 || py > box.y1)
          ++outside;
      }
    CHECK(outside == 0);
    CHECK(static_cast<double>(on) / area >= 0.4);
  }
  // The square fills its box exactly; the circle stays near pi/4.
  auto sq = rasterize_shape(1, box, H, W);
  size_t sq_on = 0;
  for (bool b : sq) sq_on += b ? 1 : 0;
  CHECK(static_cast<double>(sq_on) == area);
  auto ci = rasterize_shape(0, box, H, W);
  size_t ci_on = 0;
  for (bool b : ci) ci_on += b ? 1 : 0;
  CHECK(static_cast<double>(ci_on) / area ==
        doctest::Approx(3.14159265 / 4).epsilon(0.05));
}

TEST_CASE("generated scenes respect count, bounds and the overlap budget") {
  SynthParams p = tiny_params();
  for (uint64_t seed = 1; seed <= 12; ++seed) {
    Rng rng(seed);
    Scene s = generate_scene(p, rng);
    CHECK(s.anns.size() >= p.min_objects);
    CHECK(s.anns.size() <= p.max_objects);
    const double W = static_cast<double>(p.image_size);
    for (const auto& a : s.anns) {
      CHECK(a.class_id >= 0);
      CHECK(a.class_id < static_cast<int>(p.num_classes));
      CHECK(a.box.x0 >= 0);
      CHECK(a.box.y0 >= 0);
      CHECK(a.box.x1 <= W);
      CHECK(a.box.y1 <= W);
      CHECK(a.box.width() > 0);
    }
    for (size_t i = 0; i < s.anns.size(); ++i)
      for (size_t j = i + 1; j < s.anns.size(); ++j)
        CHECK(box_iou(s.anns[i].box, s.anns[j].box) <= 0.3);
    for (double v : s.reference.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("red light attenuates fastest under every cast preset") {
  SynthParams p = tiny_params();
  bool saw_bluish = false, saw_greenish = false;
  for (uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed);
    DegradationParams d = sample_degradation(p, rng);  // mixed preset
    CHECK(d.beta[0] > d.beta[1]);
    CHECK(d.beta[0] > d.beta[2]);
    if (d.bluish) {
      CHECK(d.beta[2] < d.beta[1]);  // blue survives best
      saw_bluish = true;
    } else {
      CHECK(d.beta[1] < d.beta[2]);  // green survives best
      saw_greenish = true;
    }
  }
  CHECK(saw_bluish);
  CHECK(saw_greenish);

  p.cast_preset = "bluish";
  Rng r1(3);
  CHECK(sample_degradation(p, r1).bluish == 1);
  p.cast_preset = "greenish";
  Rng r2(3);
  CHECK(sample_degradation(p, r2).bluish == 0);
}

TEST_CASE("degradation identity and exact corner falloff") {
  Rng rng(9);
  Tensor ref = tensor_create({3, 9, 9}, Init::uniform(0.05, 0.95), &rng);

  DegradationParams id;
  id.depth = 0.0;
  id.transmission = 1.0;
  id.vignette = 0.0;
  id.highlight = 0.0;
  Tensor same = apply_degradation(ref, id);
  for (size_t i = 0; i < ref.numel(); ++i)
    CHECK(same.values()[i] == ref.values()[i]);

  // With only the vignette active, the exact corner scales by 1-v and the
  // exact center (odd extent) is untouched.
  DegradationParams vg = id;
  vg.vignette = 0.25;
  Tensor out = apply_degradation(ref, vg);
  const size_t hw = 81, center = 4 * 9 + 4;
  for (size_t c = 0; c < 3; ++c) {
    CHECK(out.values()[c * hw + 0] ==
          doctest::Approx(0.75 * ref.values()[c * hw + 0]).epsilon(1e-12));
    CHECK(out.values()[c * hw + center] == ref.values()[c * hw + center]);
  }

  DegradationParams bad = id;
  bad.transmission = 0.0;
  CHECK_THROWS_AS(apply_degradation(ref, bad), DataError);
  bad = id;
  bad.depth = -1.0;
  CHECK_THROWS_AS(apply_degradation(ref, bad), DataError);
  CHECK_THROWS_AS(apply_degradation(Tensor::zeros({1, 9, 9}), id), ShapeError);
}

TEST_CASE("degraded images sit in the target corruption window") {
  SynthParams p = tiny_params();
  p.train_count = 10;
  p.val_count = 0;
  p.test_count = 0;
  fs::path root = fresh_dir("window");
  synthesize_dataset(p, root.string(), false);
  double psnr_sum = 0, uiqm_ref_sum = 0, uiqm_deg_sum = 0;
  for (size_t i = 0; i < p.train_count; ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "%05zu", i);
    Tensor ref = read_ppm(
        (root / "train" / "reference" / (std::string(name) + ".ppm")).string());
    Tensor deg = read_ppm(
        (root / "train" / "degraded" / (std::string(name) + ".ppm")).string());
    psnr_sum += psnr(deg, ref);
    uiqm_ref_sum += uiqm(ref);
    uiqm_deg_sum += uiqm(deg);
  }
  const double n = static_cast<double>(p.train_count);
  const double mean_psnr = psnr_sum / n;
  CHECK(mean_psnr >= 12.0);
  CHECK(mean_psnr <= 22.0);
  CHECK(uiqm_deg_sum / n < uiqm_ref_sum / n);
}

TEST_CASE("synthesis parameter validation from config") {
  Config cfg = Config::defaults();
  CHECK_NOTHROW(SynthParams::from_config(cfg));
  Config small = Config::from_text("data.image_size = 20", {});
  CHECK_THROWS_AS(SynthParams::from_config(small), ConfigError);
  Config inverted =
      Config::from_text("data.min_objects = 5\ndata.max_objects = 2", {});
  CHECK_THROWS_AS(SynthParams::from_config(inverted), ConfigError);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "dpnet/config.hpp"
#include "dpnet/model.hpp"
#include "dpnet/ops.hpp"

using namespace dpnet;

namespace {

ModelSpec small_spec() {
  ModelSpec s;
  s.shared_channels = 4;
  s.enh_channels = 4;
  s.det_base_channels = 4;
  s.det_head_channels = 6;
  s.det_levels = {2, 3};
  s.num_classes = 2;
  s.anchor_bases = {6, 12};
  s.anchor_ratios = {0.5, 1, 2};
  return s;
}

Tensor random_image(size_t H, size_t W, uint64_t seed) {
  Rng rng(seed);
  return tensor_create({3, H, W}, Init::uniform(0.0, 1.0), &rng);
}

}  // namespace

TEST_CASE("shared module holds exactly 35776 parameters at defaults") {
  Rng rng(7);
  Model m = Model::init(ModelSpec{}, rng);
  auto shared = m.params_shared();
  CHECK(count_params(shared) == 35776);
  // conv3x3(3->32) + conv5x5(32->32) + conv3x3(32->32), weights plus biases.
  CHECK(count_params({shared[0], shared[1]}) == 896);
  CHECK(count_params({shared[2], shared[3]}) == 25632);
  CHECK(count_params({shared[4], shared[5]}) == 9248);
}

TEST_CASE("parameter registries are disjoint, complete, and stable") {
  Rng rng(7);
  Model m = Model::init(ModelSpec{}, rng);
  auto shared = m.params_shared();
  auto lower = m.params_lower();
  auto all = m.params_all();
  CHECK(all.size() == shared.size() + lower.size());
  std::set<std::string> names;
  for (const auto& r : all) CHECK(names.insert(r.name).second);
  CHECK(names.count("shared.c2.w") == 1);
  CHECK(names.count("enh.bn3.beta") == 1);
  CHECK(names.count("det.cls_out.b") == 1);
  CHECK(names.count("det.stage1.entry.w") == 1);
  CHECK(names.count("det.lat2.w") == 1);
  // Enhancement and detection partitions: 19497 + 589749 parameters.
  CHECK(count_params(lower) == 19497 + 589749);
  auto bufs = m.bn_buffers();
  CHECK(bufs.size() == 6);
  CHECK(bufs[0].name == "enh.bn1.running_mean");
}

TEST_CASE("spec validation rejects non-consecutive levels and base mismatch") {
  Config cfg = Config::defaults();
  CHECK_NOTHROW(ModelSpec::from_config(cfg));
  Config bad1 = Config::from_text("model.det_levels = 2, 4", {});
  CHECK_THROWS_AS(ModelSpec::from_config(bad1), ConfigError);
  Config bad2 = Config::from_text("model.det_levels = 3, 4, 5", {});
  CHECK_THROWS_AS(ModelSpec::from_config(bad2), ConfigError);
  Config bad3 = Config::from_text("model.anchor_bases = 16, 32", {});
  CHECK_THROWS_AS(ModelSpec::from_config(bad3), ConfigError);
}

TEST_CASE("anchor grid covers 96x96 with 2268 boxes in level-major order") {
  Anchors a = make_anchors(96, 96, ModelSpec{});
  CHECK(a.total() == 2268);
  REQUIRE(a.level_cells.size() == 3);
  CHECK(a.level_cells[0] == 576);
  CHECK(a.level_cells[1] == 144);
  CHECK(a.level_cells[2] == 36);
  CHECK(a.level_offsets[0] == 0);
  CHECK(a.level_offsets[1] == 1728);
  CHECK(a.level_offsets[2] == 2160);

  // First anchor: stride 4 cell (0,0), ratio 0.5 on base 16.
  const double w = 16.0 * std::sqrt(0.5), h = 16.0 / std::sqrt(0.5);
  CHECK(a.boxes[0].x0 == doctest::Approx(2 - w / 2).epsilon(1e-12));
  CHECK(a.boxes[0].y0 == doctest::Approx(2 - h / 2).epsilon(1e-12));
  // Second anchor: same cell, ratio 1 -> exact 16x16 box, unclipped.
  CHECK(a.boxes[1].x0 == -6.0);
  CHECK(a.boxes[1].y0 == -6.0);
  CHECK(a.boxes[1].x1 == 10.0);
  CHECK(a.boxes[1].y1 == 10.0);
  // Anchor after one full row step: cell (0,1) shifts cx by the stride.
  CHECK(a.boxes[3].x0 == doctest::Approx(a.boxes[0].x0 + 4).epsilon(1e-12));
  CHECK(a.boxes[3].y0 == doctest::Approx(a.boxes[0].y0).epsilon(1e-12));
  // First stride-8 anchor sits at the level-1 offset with center (4,4).
  const Box& b8 = a.boxes[a.level_offsets[1] + 1];
  CHECK((b8.x0 + b8.x1) / 2 == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(b8.width() == doctest::Approx(32.0).epsilon(1e-12));

  CHECK_THROWS_AS(make_anchors(95, 96, ModelSpec{}), ShapeError);
}

TEST_CASE("flatten_head maps (anchor,channel,y,x) rows as documented") {
  const size_t A = 2, C = 3, h = 2, w = 2;
  Tensor t = Tensor::zeros({1, A * C, h, w});
  auto& v = t.values_mut();
  // value = a*100 + c*10 + (y*w + x); channel index is a*C + c.
  for (size_t a = 0; a < A; ++a)
    for (size_t c = 0; c < C; ++c)
      for (size_t y = 0; y < h; ++y)
        for (size_t x = 0; x < w; ++x)
          v[((a * C + c) * h + y) * w + x] =
              static_cast<double>(a * 100 + c * 10 + y * w + x);
  Tensor f = flatten_head(t, A, C);
  REQUIRE(f.shape() == Shape{h * w * A, C});
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x)
      for (size_t a = 0; a < A; ++a)
        for (size_t c = 0; c < C; ++c) {
          const size_t row = (y * w + x) * A + a;
          CHECK(f.values()[row * C + c] ==
                doctest::Approx(a * 100 + c * 10 + y * w + x));
        }
  CHECK_THROWS_AS(flatten_head(t, 4, C), ShapeError);
}

TEST_CASE("forward pass produces the documented pyramid extents") {
  Rng rng(11);
  Model m = Model::init(ModelSpec{}, rng);
  Tensor x = reshape(random_image(96, 96, 5), {1, 3, 96, 96});
  RecordGuard guard(false);
  Tensor feat = m.shared_forward(x, m.shared);
  CHECK(feat.shape() == Shape{1, 32, 96, 96});
  Tensor e = m.enhance_forward(feat, m.enh, BnMode::Eval);
  CHECK(e.shape() == Shape{1, 3, 96, 96});
  for (double v : e.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  auto outs = m.detect_forward(feat, m.det);
  REQUIRE(outs.size() == 3);
  CHECK(outs[0].cls.shape() == Shape{1, 9, 24, 24});
  CHECK(outs[0].box.shape() == Shape{1, 12, 24, 24});
  CHECK(outs[1].cls.shape() == Shape{1, 9, 12, 12});
  CHECK(outs[2].cls.shape() == Shape{1, 9, 6, 6});

  CHECK_THROWS_AS(m.shared_forward(reshape(random_image(40, 40, 6),
                                           {1, 3, 40, 40}),
                                   m.shared),
                  ShapeError);
}

TEST_CASE("fresh model predicts foreground near the configured prior") {
  Rng rng(13);
  Model m = Model::init(ModelSpec{}, rng);
  Tensor x = reshape(random_image(96, 96, 21), {1, 3, 96, 96});
  RecordGuard guard(false);
  Tensor feat = m.shared_forward(x, m.shared);
  auto outs = m.detect_forward(feat, m.det);
  double sum = 0;
  size_t n = 0;
  for (const auto& lo : outs)
    for (double v : lo.cls.values()) {
      sum += 1.0 / (1.0 + std::exp(-v));
      ++n;
    }
  const double mean = sum / static_cast<double>(n);
  CHECK(mean == doctest::Approx(0.01).epsilon(0.5));  // within 0.005..0.015
}

TEST_CASE("decode recovers the anchor box when deltas are zero") {
  ModelSpec spec = small_spec();
  Anchors a = make_anchors(16, 16, spec);
  std::vector<double> logits(a.total() * spec.num_classes, -10.0);
  std::vector<double> deltas(a.total() * 4, 0.0);
  // Pick an interior anchor (away from borders so no clipping applies).
  size_t pick = 0;
  for (size_t i = 0; i < a.total(); ++i) {
    const Box& b = a.boxes[i];
    if (b.x0 > 0 && b.y0 > 0 && b.x1 < 16 && b.y1 < 16 &&
        b.width() == doctest::Approx(6.0)) {
      pick = i;
      break;
    }
  }
  logits[pick * spec.num_classes + 1] = 2.0;
  auto dets = decode_detections(logits, deltas, a, spec, 16, 16);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].class_id == 1);
  CHECK(dets[0].anchor == pick);
  CHECK(dets[0].score == doctest::Approx(1.0 / (1.0 + std::exp(-2.0)))
                             .epsilon(1e-12));
  CHECK(dets[0].box.x0 == doctest::Approx(a.boxes[pick].x0).epsilon(1e-12));
  CHECK(dets[0].box.y1 == doctest::Approx(a.boxes[pick].y1).epsilon(1e-12));
}

TEST_CASE("decode clamps growth, clips to the image, drops degenerates") {
  ModelSpec spec = small_spec();
  spec.score_thresh = 0.3;
  Anchors a = make_anchors(16, 16, spec);
  std::vector<double> logits(a.total() * spec.num_classes, -10.0);
  std::vector<double> deltas(a.total() * 4, 0.0);
  logits[0 * spec.num_classes + 0] = 3.0;
  deltas[0 * 4 + 2] = 1000.0;  // dw would explode without the log-space cap
  deltas[0 * 4 + 3] = 1000.0;
  auto dets = decode_detections(logits, deltas, a, spec, 16, 16);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].box.x0 == 0.0);
  CHECK(dets[0].box.y0 == 0.0);
  CHECK(dets[0].box.x1 == 16.0);
  CHECK(dets[0].box.y1 == 16.0);

  // A box pushed fully outside the image is dropped as degenerate.
  std::fill(deltas.begin(), deltas.end(), 0.0);
  deltas[0 * 4 + 0] = -1000.0;
  auto gone = decode_detections(logits, deltas, a, spec, 16, 16);
  CHECK(gone.empty());
}

TEST_CASE("per-class nms matches a brute-force oracle across 50 seeds") {
  ModelSpec spec = small_spec();
  Anchors a = make_anchors(16, 16, spec);
  const size_t n = a.total(), K = spec.num_classes;
  static const double kMaxLogScale = std::log(1000.0 / 16.0);
  for (uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed);
    std::vector<double> logits(n * K), deltas(n * 4);
    for (auto& v : logits) v = rng.uniform(-6.0, 2.0);
    for (auto& v : deltas) v = rng.uniform(-2.0, 2.0);

    auto got = decode_detections(logits, deltas, a, spec, 16, 16);

    // Independent oracle: decode every candidate, then exhaustively apply
    // highest-priority-first suppression within each class.
    struct Cand {
      Box box;
      int cls;
      double score;
      size_t anchor;
    };
    std::vector<Cand> cands;
    for (size_t i = 0; i < n; ++i) {
      const Box& ab = a.boxes[i];
      for (size_t k = 0; k < K; ++k) {
        const double s = 1.0 / (1.0 + std::exp(-logits[i * K + k]));
        if (s < spec.score_thresh) continue;
        const double aw = ab.width(), ah = ab.height();
        const double cx = (ab.x0 + ab.x1) / 2 + deltas[i * 4] * 0.1 * aw;
        const double cy = (ab.y0 + ab.y1) / 2 + deltas[i * 4 + 1] * 0.1 * ah;
        const double bw =
            aw * std::exp(std::min(deltas[i * 4 + 2] * 0.2, kMaxLogScale));
        const double bh =
            ah * std::exp(std::min(deltas[i * 4 + 3] * 0.2, kMaxLogScale));
        Box bb{std::clamp(cx - bw / 2, 0.0, 16.0),
               std::clamp(cy - bh / 2, 0.0, 16.0),
               std::clamp(cx + bw / 2, 0.0, 16.0),
               std::clamp(cy + bh / 2, 0.0, 16.0)};
        if (bb.x1 <= bb.x0 || bb.y1 <= bb.y0) continue;
        cands.push_back({bb, static_cast<int>(k), s, i});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
      if (x.score != y.score) return x.score > y.score;
      if (x.anchor != y.anchor) return x.anchor < y.anchor;
      return x.cls < y.cls;
    });
    std::vector<Cand> kept;
    for (size_t i = 0; i < cands.size(); ++i) {
      bool dead = false;
      for (const auto& k : kept)
        if (k.cls == cands[i].cls && box_iou(k.box, cands[i].box) > 0.5)
          dead = true;
      if (!dead) kept.push_back(cands[i]);
    }
    std::sort(kept.begin(), kept.end(), [](const Cand& x, const Cand& y) {
      if (x.score != y.score) return x.score > y.score;
      if (x.cls != y.cls) return x.cls < y.cls;
      return x.anchor < y.anchor;
    });
    if (kept.size() > spec.max_dets) kept.resize(spec.max_dets);

    REQUIRE(got.size() == kept.size());
    for (size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].anchor == kept[i].anchor);
      CHECK(got[i].class_id == kept[i].cls);
      CHECK(got[i].score == kept[i].score);
      // Coordinates tolerate last-ulp fused-multiply-add differences between
      // the two independently written decode expressions.
      CHECK(std::abs(got[i].box.x0 - kept[i].box.x0) <= 1e-9);
      CHECK(std::abs(got[i].box.y1 - kept[i].box.y1) <= 1e-9);
    }
  }
}

TEST_CASE("pruned inference is bitwise identical and ignores the other head") {
  ModelSpec spec = small_spec();
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    Model m = Model::init(spec, rng);
    Tensor img = random_image(16, 16, seed + 100);
    InferResult both = infer(m, img, InferMode::Both);
    InferResult enh = infer(m, img, InferMode::EnhanceOnly);
    InferResult det = infer(m, img, InferMode::DetectOnly);

    REQUIRE(both.enhanced.defined());
    REQUIRE(enh.enhanced.defined());
    CHECK(!det.enhanced.defined());
    CHECK(enh.dets.empty());
    for (size_t i = 0; i < both.enhanced.values().size(); ++i)
      CHECK(both.enhanced.values()[i] == enh.enhanced.values()[i]);
    REQUIRE(both.dets.size() == det.dets.size());
    for (size_t i = 0; i < both.dets.size(); ++i) {
      CHECK(both.dets[i].score == det.dets[i].score);
      CHECK(both.dets[i].anchor == det.dets[i].anchor);
    }

    // Poisoning the unused partition must not disturb a pruned pass.
    Model poisoned = m;
    for (auto& r : poisoned.params_lower())
      if (r.name.rfind("det.", 0) == 0)
        for (double& v : r.t.values_mut()) v = std::nan("");
    InferResult enh2 = infer(poisoned, img, InferMode::EnhanceOnly);
    for (size_t i = 0; i < enh.enhanced.values().size(); ++i)
      CHECK(enh2.enhanced.values()[i] == enh.enhanced.values()[i]);
  }
}

TEST_CASE("lower_from_vec rebuilds parameter structs faithfully") {
  ModelSpec spec = small_spec();
  Rng rng(3);
  Model m = Model::init(spec, rng);
  auto lower = m.params_lower();
  std::vector<Tensor> vec;
  for (auto& r : lower) vec.push_back(r.t);
  EnhanceParams e;
  DetectParams d;
  m.lower_from_vec(vec, e, d);

  Tensor img = reshape(random_image(16, 16, 9), {1, 3, 16, 16});
  RecordGuard guard(false);
  Tensor feat = m.shared_forward(img, m.shared);
  Tensor a = m.enhance_forward(feat, m.enh, BnMode::Eval);
  Tensor b = m.enhance_forward(feat, e, BnMode::Eval);
  for (size_t i = 0; i < a.values().size(); ++i)
    CHECK(a.values()[i] == b.values()[i]);

  auto oa = m.detect_forward(feat, m.det);
  auto ob = m.detect_forward(feat, d);
  for (size_t l = 0; l < oa.size(); ++l)
    for (size_t i = 0; i < oa[l].cls.values().size(); ++i)
      CHECK(oa[l].cls.values()[i] == ob[l].cls.values()[i]);

  vec.pop_back();
  CHECK_THROWS_AS(m.lower_from_vec(vec, e, d), ShapeError);
}

#include "dpnet/model.hpp"

#include <algorithm>
#include <cmath>

#include "dpnet/autodiff.hpp"

namespace dpnet {
namespace {

ConvLayer conv_init(size_t co, size_t ci, size_t k, Rng& rng,
                    double bias_value = 0.0) {
  ConvLayer l;
  l.w = tensor_create({co, ci, k, k}, Init::kaiming(ci * k * k), &rng);
  l.b = tensor_create({co}, Init::constant(bias_value), nullptr);
  return l;
}

BnLayer bn_init(size_t c) {
  BnLayer l;
  l.gamma = tensor_create({c}, Init::constant(1.0), nullptr);
  l.beta = tensor_create({c}, Init::zeros(), nullptr);
  l.running_mean = tensor_create({c}, Init::zeros(), nullptr);
  l.running_var = tensor_create({c}, Init::constant(1.0), nullptr);
  return l;
}

void push(std::vector<ParamRef>& v, const std::string& name, const Tensor& t) {
  v.push_back({name, t});
}

void push_conv(std::vector<ParamRef>& v, const std::string& base,
               const ConvLayer& l) {
  push(v, base + ".w", l.w);
  push(v, base + ".b", l.b);
}

Tensor conv_block(const Tensor& x, const ConvLayer& l, size_t stride,
                  size_t padding) {
  return conv2d(x, l.w, l.b, stride, padding);
}

Tensor bn_apply(const Tensor& x, const BnLayer& l, BnMode mode) {
  Tensor rm = l.running_mean;  // handle copies share storage
  Tensor rv = l.running_var;
  return batchnorm2d(x, l.gamma, l.beta, rm, rv, mode);
}

}  // namespace

ModelSpec ModelSpec::from_config(const Config& cfg) {
  ModelSpec s;
  s.shared_channels = static_cast<size_t>(cfg.get_int("model.shared_channels"));
  s.enh_channels = static_cast<size_t>(cfg.get_int("model.enh_channels"));
  s.det_base_channels =
      static_cast<size_t>(cfg.get_int("model.det_base_channels"));
  s.det_head_channels =
      static_cast<size_t>(cfg.get_int("model.det_head_channels"));
  s.det_levels.clear();
  for (auto l : cfg.get_ints("model.det_levels"))
    s.det_levels.push_back(static_cast<int>(l));
  for (size_t i = 0; i < s.det_levels.size(); ++i)
    if (s.det_levels[i] != 2 + static_cast<int>(i))
      throw ConfigError(
          "model.det_levels: levels must be consecutive starting at 2");
  s.num_classes = static_cast<size_t>(cfg.get_int("model.num_classes"));
  s.anchor_bases = cfg.get_doubles("model.anchor_bases");
  if (s.anchor_bases.size() != s.det_levels.size())
    throw ConfigError("model.anchor_bases: need one base size per level (" +
                      std::to_string(s.det_levels.size()) + "), got " +
                      std::to_string(s.anchor_bases.size()));
  s.anchor_ratios = cfg.get_doubles("model.anchor_ratios");
  auto std4 = cfg.get_doubles("model.bbox_std");
  std::copy(std4.begin(), std4.end(), s.bbox_std.begin());
  s.prior_pi = cfg.get_double("model.prior_pi");
  s.score_thresh = cfg.get_double("model.score_thresh");
  s.nms_iou = cfg.get_double("model.nms_iou");
  s.max_dets = static_cast<size_t>(cfg.get_int("model.max_dets"));
  return s;
}

size_t count_params(const std::vector<ParamRef>& refs) {
  size_t n = 0;
  for (const auto& r : refs) n += r.t.numel();
  return n;
}

Model Model::init(const ModelSpec& spec, Rng& rng) {
  Model m;
  m.spec = spec;
  const size_t sc = spec.shared_channels;
  m.shared.c1 = conv_init(sc, 3, 3, rng);
  m.shared.c2 = conv_init(sc, sc, 5, rng);
  m.shared.c3 = conv_init(sc, sc, 3, rng);

  const size_t ec = spec.enh_channels;
  m.enh.c1 = conv_init(ec, sc, 3, rng);
  m.enh.bn1 = bn_init(ec);
  m.enh.c2 = conv_init(ec, ec, 3, rng);
  m.enh.bn2 = bn_init(ec);
  m.enh.c3 = conv_init(3, ec, 3, rng);
  m.enh.bn3 = bn_init(3);

  const size_t nl = spec.num_levels();
  size_t ch = spec.det_base_channels;
  m.det.stem = conv_init(ch, sc, 3, rng);
  size_t prev = ch;
  for (size_t i = 0; i < nl; ++i) {
    size_t cur = spec.det_base_channels << i;
    DetStage st;
    st.entry = conv_init(cur, prev, 3, rng);
    st.inner = conv_init(cur, cur, 3, rng);
    m.det.stages.push_back(st);
    prev = cur;
  }
  const size_t hc = spec.det_head_channels;
  for (size_t i = 0; i < nl; ++i) {
    size_t cur = spec.det_base_channels << i;
    m.det.lateral.push_back(conv_init(hc, cur, 1, rng));
    m.det.smooth.push_back(conv_init(hc, hc, 3, rng));
  }
  const size_t A = spec.anchors_per_cell();
  m.det.cls_t0 = conv_init(hc, hc, 3, rng);
  m.det.cls_t1 = conv_init(hc, hc, 3, rng);
  // Bias the class logits so a fresh model predicts foreground with
  // probability prior_pi, keeping the initial focal loss small.
  const double prior_bias = -std::log((1.0 - spec.prior_pi) / spec.prior_pi);
  m.det.cls_out = conv_init(A * spec.num_classes, hc, 3, rng, prior_bias);
  m.det.box_t0 = conv_init(hc, hc, 3, rng);
  m.det.box_t1 = conv_init(hc, hc, 3, rng);
  m.det.box_out = conv_init(A * 4, hc, 3, rng);
  for (auto& r : m.params_all()) r.t.set_requires_grad(true);
  return m;
}

std::vector<ParamRef> Model::params_shared() const {
  std::vector<ParamRef> v;
  push_conv(v, "shared.c1", shared.c1);
  push_conv(v, "shared.c2", shared.c2);
  push_conv(v, "shared.c3", shared.c3);
  return v;
}

std::vector<ParamRef> Model::params_lower() const {
  std::vector<ParamRef> v;
  push_conv(v, "enh.c1", enh.c1);
  push(v, "enh.bn1.gamma", enh.bn1.gamma);
  push(v, "enh.bn1.beta", enh.bn1.beta);
  push_conv(v, "enh.c2", enh.c2);
  push(v, "enh.bn2.gamma", enh.bn2.gamma);
  push(v, "enh.bn2.beta", enh.bn2.beta);
  push_conv(v, "enh.c3", enh.c3);
  push(v, "enh.bn3.gamma", enh.bn3.gamma);
  push(v, "enh.bn3.beta", enh.bn3.beta);
  push_conv(v, "det.stem", det.stem);
  for (size_t i = 0; i < det.stages.size(); ++i) {
    std::string base = "det.stage" + std::to_string(i);
    push_conv(v, base + ".entry", det.stages[i].entry);
    push_conv(v, base + ".inner", det.stages[i].inner);
  }
  for (size_t i = 0; i < det.lateral.size(); ++i) {
    std::string lvl = std::to_string(spec.det_levels[i]);
    push_conv(v, "det.lat" + lvl, det.lateral[i]);
    push_conv(v, "det.smooth" + lvl, det.smooth[i]);
  }
  push_conv(v, "det.cls_t0", det.cls_t0);
  push_conv(v, "det.cls_t1", det.cls_t1);
  push_conv(v, "det.cls_out", det.cls_out);
  push_conv(v, "det.box_t0", det.box_t0);
  push_conv(v, "det.box_t1", det.box_t1);
  push_conv(v, "det.box_out", det.box_out);
  return v;
}

std::vector<ParamRef> Model::params_all() const {
  auto v = params_shared();
  auto w = params_lower();
  v.insert(v.end(), w.begin(), w.end());
  return v;
}

std::vector<ParamRef> Model::bn_buffers() const {
  std::vector<ParamRef> v;
  const BnLayer* bns[3] = {&enh.bn1, &enh.bn2, &enh.bn3};
  for (size_t i = 0; i < 3; ++i) {
    std::string base = "enh.bn" + std::to_string(i + 1);
    push(v, base + ".running_mean", bns[i]->running_mean);
    push(v, base + ".running_var", bns[i]->running_var);
  }
  return v;
}

void Model::lower_from_vec(const std::vector<Tensor>& v, EnhanceParams& e,
                           DetectParams& d) const {
  auto refs = params_lower();
  if (v.size() != refs.size())
    throw ShapeError("lower_from_vec: expected " +
                     std::to_string(refs.size()) + " tensors, got " +
                     std::to_string(v.size()));
  e = enh;  // copies BN buffer handles; weights replaced below
  d = det;
  size_t i = 0;
  auto take = [&](Tensor& dst) { dst = v[i++]; };
  take(e.c1.w);
  take(e.c1.b);
  take(e.bn1.gamma);
  take(e.bn1.beta);
  take(e.c2.w);
  take(e.c2.b);
  take(e.bn2.gamma);
  take(e.bn2.beta);
  take(e.c3.w);
  take(e.c3.b);
  take(e.bn3.gamma);
  take(e.bn3.beta);
  take(d.stem.w);
  take(d.stem.b);
  for (auto& st : d.stages) {
    take(st.entry.w);
    take(st.entry.b);
    take(st.inner.w);
    take(st.inner.b);
  }
  for (size_t l = 0; l < d.lateral.size(); ++l) {
    take(d.lateral[l].w);
    take(d.lateral[l].b);
    take(d.smooth[l].w);
    take(d.smooth[l].b);
  }
  take(d.cls_t0.w);
  take(d.cls_t0.b);
  take(d.cls_t1.w);
  take(d.cls_t1.b);
  take(d.cls_out.w);
  take(d.cls_out.b);
  take(d.box_t0.w);
  take(d.box_t0.b);
  take(d.box_t1.w);
  take(d.box_t1.b);
  take(d.box_out.w);
  take(d.box_out.b);
}

Tensor Model::shared_forward(const Tensor& x, const SharedParams& u) const {
  if (!x.defined() || x.rank() != 4 || x.shape()[1] != 3)
    throw ShapeError("shared_forward: expected [N,3,H,W] input");
  const size_t H = x.shape()[2], W = x.shape()[3];
  const size_t ms = spec.max_stride();
  if (H % ms != 0 || W % ms != 0)
    throw ShapeError("shared_forward: image " + std::to_string(H) + "x" +
                     std::to_string(W) + " not divisible by the largest " +
                     "detection stride " + std::to_string(ms));
  Tensor h1 = relu(conv_block(x, u.c1, 1, 1));
  Tensor h2 = relu(conv_block(h1, u.c2, 1, 2));
  return conv_block(h2, u.c3, 1, 1);  // linear output
}

Tensor Model::enhance_forward(const Tensor& feat, const EnhanceParams& p,
                              BnMode mode) const {
  Tensor h1 = relu(bn_apply(conv_block(feat, p.c1, 1, 1), p.bn1, mode));
  Tensor h2 = relu(bn_apply(conv_block(h1, p.c2, 1, 1), p.bn2, mode));
  return sigmoid(bn_apply(conv_block(h2, p.c3, 1, 1), p.bn3, mode));
}

std::vector<LevelOut> Model::detect_forward(const Tensor& feat,
                                            const DetectParams& p) const {
  Tensor x = relu(conv_block(feat, p.stem, 2, 1));
  std::vector<Tensor> cs;
  for (const auto& st : p.stages) {
    x = relu(conv_block(x, st.entry, 2, 1));
    x = relu(conv_block(x, st.inner, 1, 1));
    cs.push_back(x);
  }
  const size_t nl = cs.size();
  std::vector<Tensor> ps(nl);
  Tensor top = conv_block(cs[nl - 1], p.lateral[nl - 1], 1, 0);
  ps[nl - 1] = top;
  for (size_t i = nl - 1; i-- > 0;) {
    Tensor lat = conv_block(cs[i], p.lateral[i], 1, 0);
    ps[i] = add(lat, upsample_nearest(ps[i + 1], 2));
  }
  std::vector<LevelOut> outs(nl);
  for (size_t i = 0; i < nl; ++i) {
    Tensor pi = conv_block(ps[i], p.smooth[i], 1, 1);
    Tensor tc = relu(conv_block(pi, p.cls_t0, 1, 1));
    tc = relu(conv_block(tc, p.cls_t1, 1, 1));
    outs[i].cls = conv_block(tc, p.cls_out, 1, 1);
    Tensor tb = relu(conv_block(pi, p.box_t0, 1, 1));
    tb = relu(conv_block(tb, p.box_t1, 1, 1));
    outs[i].box = conv_block(tb, p.box_out, 1, 1);
  }
  return outs;
}

Anchors make_anchors(size_t H, size_t W, const ModelSpec& spec) {
  Anchors a;
  for (size_t li = 0; li < spec.num_levels(); ++li) {
    const size_t stride = size_t{1} << static_cast<size_t>(spec.det_levels[li]);
    if (H % stride != 0 || W % stride != 0)
      throw ShapeError("make_anchors: image not divisible by stride " +
                       std::to_string(stride));
    const size_t gh = H / stride, gw = W / stride;
    a.level_offsets.push_back(a.boxes.size());
    a.level_cells.push_back(gh * gw);
    const double base = spec.anchor_bases[li];
    for (size_t y = 0; y < gh; ++y)
      for (size_t x = 0; x < gw; ++x) {
        const double cx = (static_cast<double>(x) + 0.5) * stride;
        const double cy = (static_cast<double>(y) + 0.5) * stride;
        for (double r : spec.anchor_ratios) {
          const double bw = base * std::sqrt(r);
          const double bh = base / std::sqrt(r);
          a.boxes.push_back(
              {cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2});
        }
      }
  }
  return a;
}

Tensor flatten_head(const Tensor& level_out, size_t A, size_t C) {
  const auto& s = level_out.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != A * C)
    throw ShapeError("flatten_head: expected [1," + std::to_string(A * C) +
                     ",h,w] input, got " + shape_str(s));
  const size_t h = s[2], w = s[3];
  Tensor r = reshape(level_out, {1, A, C, h, w});
  Tensor p = permute(r, {0, 3, 4, 1, 2});  // [1,h,w,A,C]
  return reshape(p, {h * w * A, C});
}

std::vector<Detection> decode_detections(const std::vector<double>& cls_logits,
                                         const std::vector<double>& box_deltas,
                                         const Anchors& anchors,
                                         const ModelSpec& spec, size_t H,
                                         size_t W) {
  const size_t n = anchors.total();
  const size_t K = spec.num_classes;
  if (cls_logits.size() != n * K || box_deltas.size() != n * 4)
    throw ShapeError("decode_detections: output size mismatch with anchors");
  static const double kMaxLogScale = std::log(1000.0 / 16.0);
  std::vector<Detection> cands;
  for (size_t i = 0; i < n; ++i) {
    const Box& ab = anchors.boxes[i];
    const double aw = ab.width(), ah = ab.height();
    const double acx = (ab.x0 + ab.x1) / 2, acy = (ab.y0 + ab.y1) / 2;
    bool decoded = false;
    Box bb;
    for (size_t k = 0; k < K; ++k) {
      const double logit = cls_logits[i * K + k];
      const double s = 1.0 / (1.0 + std::exp(-logit));
      if (s < spec.score_thresh) continue;
      if (!decoded) {
        const double dx = box_deltas[i * 4 + 0] * spec.bbox_std[0];
        const double dy = box_deltas[i * 4 + 1] * spec.bbox_std[1];
        double dw = box_deltas[i * 4 + 2] * spec.bbox_std[2];
        double dh = box_deltas[i * 4 + 3] * spec.bbox_std[3];
        dw = std::min(dw, kMaxLogScale);
        dh = std::min(dh, kMaxLogScale);
        const double cx = acx + dx * aw, cy = acy + dy * ah;
        const double bw = aw * std::exp(dw), bh = ah * std::exp(dh);
        bb.x0 = std::min(std::max(cx - bw / 2, 0.0), static_cast<double>(W));
        bb.y0 = std::min(std::max(cy - bh / 2, 0.0), static_cast<double>(H));
        bb.x1 = std::min(std::max(cx + bw / 2, 0.0), static_cast<double>(W));
        bb.y1 = std::min(std::max(cy + bh / 2, 0.0), static_cast<double>(H));
        decoded = true;
      }
      if (bb.x1 <= bb.x0 || bb.y1 <= bb.y0) continue;
      cands.push_back({bb, static_cast<int>(k), s, i});
    }
  }
  // Deterministic order: score desc, then anchor asc, then class asc.
  std::sort(cands.begin(), cands.end(), [](const Detection& a,
                                           const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.anchor != b.anchor) return a.anchor < b.anchor;
    return a.class_id < b.class_id;
  });
  std::vector<Detection> kept;
  for (size_t k = 0; k < K; ++k) {
    std::vector<const Detection*> cls_kept;
    for (const auto& c : cands) {
      if (c.class_id != static_cast<int>(k)) continue;
      bool suppressed = false;
      for (const Detection* d : cls_kept)
        if (box_iou(c.box, d->box) > spec.nms_iou) {
          suppressed = true;
          break;
        }
      if (!suppressed) cls_kept.push_back(&c);
    }
    for (const Detection* d : cls_kept) kept.push_back(*d);
  }
  std::sort(kept.begin(), kept.end(), [](const Detection& a,
                                         const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return a.anchor < b.anchor;
  });
  if (kept.size() > spec.max_dets) kept.resize(spec.max_dets);
  return kept;
}

InferResult infer(const Model& m, const Tensor& img, InferMode mode) {
  if (!img.defined() || img.rank() != 3 || img.shape()[0] != 3)
    throw ShapeError("infer: expected a [3,H,W] image");
  RecordGuard untracked(false);
  const size_t H = img.shape()[1], W = img.shape()[2];
  Tensor x = reshape(img, {1, 3, H, W});
  Tensor feat = m.shared_forward(x, m.shared);
  InferResult res;
  if (mode != InferMode::DetectOnly) {
    Tensor e = m.enhance_forward(feat, m.enh, BnMode::Eval);
    res.enhanced = reshape(e, {3, H, W});
  }
  if (mode != InferMode::EnhanceOnly) {
    auto outs = m.detect_forward(feat, m.det);
    const size_t A = m.spec.anchors_per_cell(), K = m.spec.num_classes;
    std::vector<double> cls_flat, box_flat;
    for (const auto& lo : outs) {
      const auto& cv = flatten_head(lo.cls, A, K).values();
      cls_flat.insert(cls_flat.end(), cv.begin(), cv.end());
      const auto& bv = flatten_head(lo.box, A, 4).values();
      box_flat.insert(box_flat.end(), bv.begin(), bv.end());
    }
    Anchors anchors = make_anchors(H, W, m.spec);
    res.dets = decode_detections(cls_flat, box_flat, anchors, m.spec, H, W);
  }
  return res;
}

}  // namespace dpnet

// Dual perception network: a shared convolutional feature module feeding an
// image enhancement subnet and a pyramid-based object detection subnet.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "dpnet/config.hpp"
#include "dpnet/image_io.hpp"
#include "dpnet/ops.hpp"
#include "dpnet/rng.hpp"

namespace dpnet {

struct ModelSpec {
  size_t shared_channels = 32;
  size_t enh_channels = 32;
  size_t det_base_channels = 32;
  size_t det_head_channels = 64;
  std::vector<int> det_levels = {2, 3, 4};  // stride 2^L per level
  size_t num_classes = 3;
  std::vector<double> anchor_bases = {16, 32, 64};
  std::vector<double> anchor_ratios = {0.5, 1, 2};
  std::array<double, 4> bbox_std = {0.1, 0.1, 0.2, 0.2};
  double prior_pi = 0.01;
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  size_t max_dets = 100;

  size_t num_levels() const { return det_levels.size(); }
  size_t anchors_per_cell() const { return anchor_ratios.size(); }
  size_t max_stride() const {
    return size_t{1} << static_cast<size_t>(det_levels.back());
  }
  static ModelSpec from_config(const Config& cfg);
};

struct ConvLayer {
  Tensor w, b;
};

struct BnLayer {
  Tensor gamma, beta, running_mean, running_var;
};

struct SharedParams {
  ConvLayer c1, c2, c3;
};

struct EnhanceParams {
  ConvLayer c1, c2, c3;
  BnLayer bn1, bn2, bn3;
};

struct DetStage {
  ConvLayer entry, inner;
};

struct DetectParams {
  ConvLayer stem;
  std::vector<DetStage> stages;            // one per pyramid level
  std::vector<ConvLayer> lateral, smooth;  // one per pyramid level
  ConvLayer cls_t0, cls_t1, cls_out;
  ConvLayer box_t0, box_t1, box_out;
};

// Named handle to a parameter tensor; copies share the underlying storage.
struct ParamRef {
  std::string name;
  Tensor t;
};

size_t count_params(const std::vector<ParamRef>& refs);

struct LevelOut {
  Tensor cls, box;  // [N, A*K, h, w] and [N, A*4, h, w]
};

struct Model {
  ModelSpec spec;
  SharedParams shared;
  EnhanceParams enh;
  DetectParams det;

  static Model init(const ModelSpec& spec, Rng& rng);

  // Fixed registry orders; checkpoint layout and optimizer slots rely on them.
  std::vector<ParamRef> params_shared() const;  // upper-level partition
  std::vector<ParamRef> params_lower() const;   // enhancement + detection
  std::vector<ParamRef> params_all() const;
  std::vector<ParamRef> bn_buffers() const;

  // Rebuild parameter structs from tensors aligned with params_lower() order;
  // used to evaluate losses at substituted lower-level weights.
  void lower_from_vec(const std::vector<Tensor>& v, EnhanceParams& e,
                      DetectParams& d) const;

  Tensor shared_forward(const Tensor& x, const SharedParams& u) const;
  Tensor enhance_forward(const Tensor& feat, const EnhanceParams& p,
                         BnMode mode) const;
  std::vector<LevelOut> detect_forward(const Tensor& feat,
                                       const DetectParams& p) const;
};

struct Anchors {
  std::vector<Box> boxes;             // level-major, then (y, x, ratio)
  std::vector<size_t> level_cells;    // grid cells per level
  std::vector<size_t> level_offsets;  // first box index per level
  size_t total() const { return boxes.size(); }
};

Anchors make_anchors(size_t H, size_t W, const ModelSpec& spec);

// [1, A*C, h, w] head output -> [h*w*A, C] rows ordered (y, x, anchor).
Tensor flatten_head(const Tensor& level_out, size_t A, size_t C);

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0;
  size_t anchor = 0;
};

// Decodes one image's head outputs (flattened per flatten_head, levels
// concatenated in anchor order) into final detections with per-class NMS.
std::vector<Detection> decode_detections(const std::vector<double>& cls_logits,
                                         const std::vector<double>& box_deltas,
                                         const Anchors& anchors,
                                         const ModelSpec& spec, size_t H,
                                         size_t W);

enum class InferMode { Both, DetectOnly, EnhanceOnly };

struct InferResult {
  Tensor enhanced;                  // defined unless DetectOnly
  std::vector<Detection> dets;      // empty when EnhanceOnly
};

// Untracked single-image inference ([3,H,W] input). EnhanceOnly never touches
// detection parameters and DetectOnly never touches enhancement parameters.
InferResult infer(const Model& m, const Tensor& img, InferMode mode);

}  // namespace dpnet

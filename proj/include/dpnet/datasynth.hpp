// Synthetic underwater dataset: clean scenes of simple shapes over textured
// backgrounds, degraded by a color cast, haze and lighting falloff applied in
// that fixed order. Every sample is reproducible from one derived seed, and
// the manifest records the exact degradation parameters for bitwise replay.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "dpnet/config.hpp"
#include "dpnet/image_io.hpp"
#include "dpnet/rng.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

struct SynthParams {
  size_t image_size = 96;
  size_t train_count = 200, val_count = 40, test_count = 40;
  std::uint64_t seed = 7;
  size_t min_objects = 1, max_objects = 5;
  size_t num_classes = 3;
  std::string cast_preset = "mixed";
  std::array<double, 2> depth_range{1.0, 1.8};
  std::array<double, 2> transmission_range{0.35, 0.65};
  std::array<double, 2> airlight_range{0.7, 0.95};
  std::array<double, 2> vignette_range{0.05, 0.15};
  std::array<double, 2> highlight_range{0.03, 0.1};
  double highlight_prob = 0.3;
  bool per_pixel_transmission = false;
  static SynthParams from_config(const Config& cfg);
};

struct Scene {
  Tensor reference;  // [3,H,W] clean image
  std::vector<Annotation> anns;
};

struct DegradationParams {
  int bluish = 1;  // cast direction actually drawn (also under "mixed")
  std::array<double, 3> beta{0.9, 0.4, 0.1};
  double depth = 1.0;
  double transmission = 0.8;
  double airlight = 0.8;
  double vignette = 0.2;
  double highlight = 0.0;  // peak intensity; 0 disables the highlight
  double hl_cx = 0.0, hl_cy = 0.0, hl_sigma = 1.0;
  bool per_pixel_transmission = false;
};

// Class ids: 0 = circle, 1 = square, 2 = triangle; further ids cycle.
// Returns the pixel coverage mask of one object inside its box.
std::vector<bool> rasterize_shape(int class_id, const Box& box, size_t H,
                                  size_t W);

Scene generate_scene(const SynthParams& p, Rng& rng);
DegradationParams sample_degradation(const SynthParams& p, Rng& rng);
Tensor apply_degradation(const Tensor& reference, const DegradationParams& d);

// Writes root/{train,val,test}/{degraded,reference,annotations}/NNNNN.* and
// root/manifest.tsv. Refuses a non-empty root unless overwrite is set.
void synthesize_dataset(const SynthParams& p, const std::string& root,
                        bool overwrite);

// Re-applies the manifest's recorded parameters to the stored reference
// images and verifies the degraded files match bitwise; returns the number
// of samples checked, throwing DataError on any mismatch.
size_t verify_manifest_replay(const std::string& root);

}  // namespace dpnet

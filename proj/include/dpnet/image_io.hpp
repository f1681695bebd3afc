// Binary PPM (P6, maxval 255) image I/O and plain-text box annotations.
// All writes go through a temp file and an atomic rename.
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "dpnet/tensor.hpp"

namespace dpnet {

// Axis-aligned box in pixel coordinates, [x0,x1) x [y0,y1).
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
};

struct Annotation {
  int class_id = 0;
  Box box;
};

// Intersection over union; empty or degenerate boxes contribute no overlap.
inline double box_iou(const Box& a, const Box& b) {
  const double iw =
      std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih =
      std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double uni = std::max(0.0, a.area()) + std::max(0.0, b.area()) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Images are [3,H,W] tensors with values in [0,1].
Tensor read_ppm(const std::string& path);
std::string encode_ppm(const Tensor& img);  // header + quantized pixel bytes
void write_ppm(const std::string& path, const Tensor& img);

std::vector<Annotation> read_annotations(const std::string& path);
void write_annotations(const std::string& path,
                       const std::vector<Annotation>& anns);

// Writes to `path` atomically (temp file in the same directory, then rename).
void atomic_write(const std::string& path, const std::string& bytes);
std::string read_file_bytes(const std::string& path);

}  // namespace dpnet

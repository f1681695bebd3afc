// Loads a synthesized dataset tree into memory and guards against samples
// leaking between splits.
#pragma once

#include <string>
#include <vector>

#include "dpnet/image_io.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

enum class Split { Train = 0, Val = 1, Test = 2 };

struct Sample {
  Tensor degraded, reference;  // [3,H,W]
  std::vector<Annotation> anns;
};

class Dataset {
 public:
  // Reads every split directory present under root. Throws ConfigError if
  // any degraded image appears in more than one split (content hash).
  static Dataset load(const std::string& root);

  const std::vector<Sample>& split(Split s) const {
    return splits_[static_cast<size_t>(s)];
  }
  std::vector<Sample>& split_mut(Split s) {
    return splits_[static_cast<size_t>(s)];
  }
  size_t image_size() const { return image_size_; }

 private:
  std::vector<Sample> splits_[3];
  size_t image_size_ = 0;
};

}  // namespace dpnet

#include "dpnet/dataset.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>

namespace dpnet {
namespace {

namespace fs = std::filesystem;

std::array<unsigned char, 32> sha256_bytes(const std::string& bytes) {
  std::array<unsigned char, 32> md{};
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(),
                  nullptr) ||
      len != 32)
    throw Error("SHA-256 digest computation failed");
  return md;
}

}  // namespace

Dataset Dataset::load(const std::string& root) {
  if (!fs::exists(root))
    throw DataError("dataset root '" + root + "' does not exist");
  static const char* kNames[3] = {"train", "val", "test"};
  Dataset ds;
  std::map<std::array<unsigned char, 32>, std::string> seen;
  for (size_t si = 0; si < 3; ++si) {
    const fs::path dir = fs::path(root) / kNames[si] / "degraded";
    if (!fs::exists(dir)) continue;
    std::vector<std::string> stems;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".ppm")
        stems.push_back(e.path().stem().string());
    std::sort(stems.begin(), stems.end());
    for (const auto& stem : stems) {
      const fs::path base = fs::path(root) / kNames[si];
      Sample s;
      const std::string deg_path = (dir / (stem + ".ppm")).string();
      const std::string bytes = read_file_bytes(deg_path);
      const std::string tag = std::string(kNames[si]) + "/" + stem;
      auto [it, fresh] = seen.emplace(sha256_bytes(bytes), tag);
      if (!fresh)
        throw ConfigError("dataset split overlap: " + tag +
                          " duplicates " + it->second);
      s.degraded = read_ppm(deg_path);
      s.reference =
          read_ppm((base / "reference" / (stem + ".ppm")).string());
      if (s.degraded.shape() != s.reference.shape())
        throw DataError(tag + ": degraded/reference size mismatch");
      s.anns =
          read_annotations((base / "annotations" / (stem + ".txt")).string());
      if (ds.image_size_ == 0)
        ds.image_size_ = s.degraded.shape()[1];
      else if (s.degraded.shape()[1] != ds.image_size_ ||
               s.degraded.shape()[2] != ds.image_size_)
        throw DataError(tag + ": image size differs from the rest");
      ds.splits_[si].push_back(std::move(s));
    }
  }
  if (ds.splits_[0].empty())
    throw DataError("dataset '" + root + "' has no training samples");
  return ds;
}

}  // namespace dpnet

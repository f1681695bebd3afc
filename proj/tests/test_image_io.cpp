#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "dpnet/common.hpp"
#include "dpnet/image_io.hpp"
#include "dpnet/rng.hpp"

using namespace dpnet;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

Tensor quantized_random_image(size_t H, size_t W, uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({3, H, W});
  for (double& v : t.values_mut())
    v = std::nearbyint(rng.uniform() * 255.0) / 255.0;
  return t;
}

}  // namespace

TEST_CASE("ppm round trip preserves bytes and values") {
  Tensor img = quantized_random_image(9, 7, 1234);
  const std::string p = tmp_path("io_rt.ppm");
  write_ppm(p, img);
  Tensor back = read_ppm(p);
  REQUIRE(back.shape() == Shape{3, 9, 7});
  for (size_t i = 0; i < img.values().size(); ++i)
    CHECK(back.values()[i] == img.values()[i]);

  // Re-encoding the decoded image reproduces the file bitwise.
  CHECK(encode_ppm(back) == read_file_bytes(p));
  fs::remove(p);
}

TEST_CASE("ppm header with comments parses") {
  const std::string p = tmp_path("io_comment.ppm");
  std::string body(2 * 1 * 3, '\x40');
  atomic_write(p, "P6\n# width then height\n2 1\n# maxval\n255\n" + body);
  Tensor t = read_ppm(p);
  CHECK(t.shape() == Shape{3, 1, 2});
  CHECK(t.values()[0] == doctest::Approx(0x40 / 255.0).epsilon(1e-12));
  fs::remove(p);
}

TEST_CASE("ppm rejects bad magic, maxval, and truncation") {
  const std::string p = tmp_path("io_bad.ppm");
  atomic_write(p, "P5\n2 2\n255\n" + std::string(12, 'x'));
  CHECK_THROWS_AS(read_ppm(p), DataError);

  atomic_write(p, "P6\n2 2\n65535\n" + std::string(24, 'x'));
  CHECK_THROWS_AS(read_ppm(p), DataError);

  atomic_write(p, "P6\n2 2\n255\n" + std::string(5, 'x'));
  CHECK_THROWS_AS(read_ppm(p), DataError);

  CHECK_THROWS_AS(read_ppm(tmp_path("io_missing_file.ppm")), DataError);
  fs::remove(p);
}

TEST_CASE("encode rejects non-finite pixels and clamps out-of-range") {
  Tensor img = Tensor::full({3, 2, 2}, 0.5);
  img.values_mut()[3] = std::nan("");
  CHECK_THROWS_AS(encode_ppm(img), NumericError);

  Tensor hot = Tensor::full({3, 2, 2}, 1.7);
  const std::string bytes = encode_ppm(hot);
  CHECK(static_cast<unsigned char>(bytes.back()) == 255);
}

TEST_CASE("annotations round trip and reject degenerate boxes") {
  const std::string p = tmp_path("io_anns.txt");
  std::vector<Annotation> anns = {{0, {2, 3, 10, 12}}, {2, {0, 0, 5, 4}}};
  write_annotations(p, anns);
  auto back = read_annotations(p);
  REQUIRE(back.size() == 2);
  CHECK(back[0].class_id == 0);
  CHECK(back[0].box.x0 == 2);
  CHECK(back[1].box.y1 == 4);

  atomic_write(p, "0 5 5 5 9\n");  // x0 == x1
  CHECK_THROWS_WITH_AS(read_annotations(p), doctest::Contains("line 1"),
                       DataError);
  fs::remove(p);
}

TEST_CASE("atomic write leaves no temp file and replaces content") {
  const std::string p = tmp_path("io_atomic.bin");
  atomic_write(p, "first");
  atomic_write(p, "second");
  CHECK(read_file_bytes(p) == "second");
  size_t leftovers = 0;
  for (const auto& e : fs::directory_iterator(fs::temp_directory_path())) {
    const std::string n = e.path().filename().string();
    if (n.rfind("io_atomic.bin", 0) == 0 && n != "io_atomic.bin") ++leftovers;
  }
  CHECK(leftovers == 0);
  fs::remove(p);
}

TEST_CASE("box_iou handles disjoint, nested, and empty boxes") {
  CHECK(box_iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
  CHECK(box_iou({0, 0, 1, 1}, {2, 2, 3, 3}) == 0.0);
  CHECK(box_iou({0, 0, 4, 4}, {1, 1, 2, 2}) == doctest::Approx(1.0 / 16.0));
  CHECK(box_iou({0, 0, 0, 0}, {0, 0, 0, 0}) == 0.0);
}

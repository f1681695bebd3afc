#include "dpnet/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dpnet {
namespace {

// Reads one whitespace-delimited token, skipping '#' comments per the PNM
// header grammar.
std::string next_header_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok += static_cast<char>(c);
  }
  if (tok.empty()) throw DataError(path + ": truncated PPM header");
  return tok;
}

size_t parse_dim(const std::string& tok, const std::string& path,
                 const char* what) {
  size_t v = 0;
  for (char ch : tok) {
    if (ch < '0' || ch > '9')
      throw DataError(path + ": bad PPM " + what + " '" + tok + "'");
    v = v * 10 + static_cast<size_t>(ch - '0');
    if (v > 1000000) throw DataError(path + ": PPM " + what + " too large");
  }
  if (v == 0) throw DataError(path + ": PPM " + what + " must be positive");
  return v;
}

}  // namespace

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image '" + path + "'");
  if (next_header_token(in, path) != "P6")
    throw DataError(path + ": not a binary PPM (expected magic P6)");
  size_t w = parse_dim(next_header_token(in, path), path, "width");
  size_t h = parse_dim(next_header_token(in, path), path, "height");
  if (next_header_token(in, path) != "255")
    throw DataError(path + ": unsupported PPM maxval (expected 255)");
  // The header token reader consumed exactly the single whitespace byte that
  // separates the maxval from the pixel data.
  std::vector<unsigned char> raw(w * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (static_cast<size_t>(in.gcount()) != raw.size())
    throw DataError(path + ": truncated PPM pixel data");
  Tensor img = Tensor::zeros({3, h, w});
  double* v = img.values_mut().data();
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x)
      for (size_t c = 0; c < 3; ++c)
        v[(c * h + y) * w + x] = raw[(y * w + x) * 3 + c] / 255.0;
  return img;
}

std::string encode_ppm(const Tensor& img) {
  if (!img.defined() || img.shape().size() != 3 || img.shape()[0] != 3)
    throw ShapeError("encode_ppm: expected a [3,H,W] image");
  const size_t h = img.shape()[1], w = img.shape()[2];
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) +
                    "\n255\n";
  out.reserve(out.size() + w * h * 3);
  const double* v = img.values().data();
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x)
      for (size_t c = 0; c < 3; ++c) {
        double d = v[(c * h + y) * w + x];
        if (!std::isfinite(d))
          throw NumericError("encode_ppm: non-finite pixel");
        double q = std::nearbyint(std::min(1.0, std::max(0.0, d)) * 255.0);
        out += static_cast<char>(static_cast<unsigned char>(q));
      }
  return out;
}

void write_ppm(const std::string& path, const Tensor& img) {
  atomic_write(path, encode_ppm(img));
}

std::vector<Annotation> read_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotations '" + path + "'");
  std::vector<Annotation> anns;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Annotation a;
    long x0, y0, x1, y1;
    if (!(ls >> a.class_id >> x0 >> y0 >> x1 >> y1))
      throw DataError(path + " line " + std::to_string(lineno) +
                      ": expected 'class_id x_min y_min x_max y_max'");
    a.box = {static_cast<double>(x0), static_cast<double>(y0),
             static_cast<double>(x1), static_cast<double>(y1)};
    if (a.class_id < 0 || x1 <= x0 || y1 <= y0)
      throw DataError(path + " line " + std::to_string(lineno) +
                      ": degenerate annotation");
    anns.push_back(a);
  }
  return anns;
}

void write_annotations(const std::string& path,
                       const std::vector<Annotation>& anns) {
  std::string out;
  char buf[128];
  for (const auto& a : anns) {
    std::snprintf(buf, sizeof(buf), "%d %ld %ld %ld %ld\n", a.class_id,
                  std::lround(a.box.x0), std::lround(a.box.y0),
                  std::lround(a.box.x1), std::lround(a.box.y1));
    out += buf;
  }
  atomic_write(path, out);
}

void atomic_write(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot create '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw DataError("short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec)
    throw DataError("cannot rename '" + tmp.string() + "' to '" + path +
                    "': " + ec.message());
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace dpnet

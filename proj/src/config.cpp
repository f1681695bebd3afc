#include "dpnet/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace dpnet {
namespace {

const std::vector<ConfigEntry>& schema_table() {
  static const std::vector<ConfigEntry> s = {
      {"model.shared_channels", "int", "32", 1, 512, "",
       "channel width of the shared feature module"},
      {"model.enh_channels", "int", "32", 1, 512, "",
       "hidden channel width of the enhancement subnet"},
      {"model.det_base_channels", "int", "32", 1, 512, "",
       "width of the first detection stage; later stages double it"},
      {"model.det_head_channels", "int", "64", 1, 512, "",
       "channel width of the pyramid and the detection heads"},
      {"model.det_levels", "ints", "2,3,4", 2, 6, "0",
       "pyramid levels (stride 2^L each); must be consecutive starting at 2"},
      {"model.num_classes", "int", "3", 1, 64, "",
       "number of object classes"},
      {"model.anchor_bases", "doubles", "16,32,64", 1, 4096, "0",
       "anchor base size in pixels, one per pyramid level"},
      {"model.anchor_ratios", "doubles", "0.5,1,2", 0.01, 100, "0",
       "anchor aspect ratios shared by all levels"},
      {"model.bbox_std", "doubles", "0.1,0.1,0.2,0.2", 1e-6, 10, "4",
       "divisors for the (dx,dy,dw,dh) box regression targets"},
      {"model.prior_pi", "double", "0.01", 1e-6, 0.499, "",
       "prior foreground probability used to bias the class output layer"},
      {"model.score_thresh", "double", "0.05", 0, 1, "",
       "minimum class score kept before non-maximum suppression"},
      {"model.nms_iou", "double", "0.5", 1e-6, 1, "",
       "overlap above which a lower-scored box is suppressed"},
      {"model.max_dets", "int", "100", 1, 10000,
       "", "maximum detections kept per image"},

      {"loss.focal_alpha", "double", "0.25", 1e-6, 0.999999, "",
       "foreground weight of the focal classification loss"},
      {"loss.focal_gamma", "double", "2", 0, 10, "",
       "focusing exponent of the focal classification loss"},
      {"loss.smooth_l1_beta", "double", "0.1111111111111111", 1e-6, 10, "",
       "quadratic-to-linear switch point of the box regression loss"},
      {"loss.enh_mode", "enum", "l1", 0, 0, "l1|l1+ssim",
       "enhancement reconstruction loss"},
      {"loss.w_det", "double", "1", 0, 100, "",
       "weight of the detection loss in the joint objective"},
      {"loss.w_enh", "double", "1", 0, 100, "",
       "weight of the enhancement loss in the joint objective"},
      {"loss.pos_iou", "double", "0.5", 1e-6, 1, "",
       "anchor overlap at or above which an anchor is a positive match"},
      {"loss.neg_iou", "double", "0.4", 0, 0.999999, "",
       "anchor overlap below which an anchor is background"},

      {"trainer.lr", "double", "0.002", 1e-12, 1, "",
       "base learning rate of the lower-level (weights) optimizer"},
      {"trainer.lr_upper", "double", "0.002", 1e-12, 1, "",
       "learning rate of the upper-level (shared module) optimizer"},
      {"trainer.lr_decay", "double", "0.92", 1e-6, 1, "",
       "multiplicative learning-rate decay applied per epoch"},
      {"trainer.epochs", "int", "30", 1, 10000, "",
       "number of training epochs"},
      {"trainer.batch_size", "int", "2", 1, 64, "",
       "images per optimization step"},
      {"trainer.seed", "int", "42", 0, 4611686018427387904.0, "",
       "master seed for all training-time randomness"},
      {"trainer.upper_mode", "enum", "first_order", 0, 0,
       "first_order|unrolled_exact|unrolled_fd",
       "hypergradient estimator for the upper-level update"},
      {"trainer.unroll_eta", "double", "0.002", 1e-12, 1, "",
       "inner gradient-descent step size used by the unrolled estimators"},
      {"trainer.unroll_param_limit", "int", "150000", 1, 1000000000, "",
       "largest lower-level parameter count allowed for unrolled_exact"},
      {"trainer.val_fraction", "double", "0.1", 1e-3, 0.5, "",
       "fraction of train held out when the dataset has no val split"},

      {"data.root", "string", "dataset", 0, 0, "",
       "dataset root directory"},
      {"data.image_size", "int", "96", 16, 256, "",
       "square image side in pixels; must be divisible by the largest stride"},
      {"data.train_count", "int", "200", 1, 100000, "",
       "generated training images"},
      {"data.val_count", "int", "40", 0, 100000, "",
       "generated validation images (0 = hold out from train instead)"},
      {"data.test_count", "int", "40", 1, 100000, "",
       "generated test images"},
      {"data.seed", "int", "7", 0, 4611686018427387904.0, "",
       "master seed for dataset generation"},
      {"data.min_objects", "int", "1", 1, 16, "",
       "minimum objects per scene"},
      {"data.max_objects", "int", "5", 1, 16, "",
       "maximum objects per scene"},
      {"data.cast_preset", "enum", "mixed", 0, 0, "bluish|greenish|mixed",
       "water color-cast preset; mixed picks bluish or greenish per image"},
      {"data.depth_range", "range", "1,1.8", 0, 10, "2",
       "scene depth range driving the color cast attenuation"},
      {"data.transmission_range", "range", "0.35,0.65", 1e-6, 1, "2",
       "haze transmission range (1 = no haze)"},
      {"data.airlight_range", "range", "0.7,0.95", 0, 1, "2",
       "haze airlight brightness range before water tinting"},
      {"data.vignette_range", "range", "0.05,0.15", 0, 0.999, "2",
       "corner darkening strength range"},
      {"data.highlight_intensity_range", "range", "0.03,0.1", 0, 1, "2",
       "additive Gaussian highlight peak range"},
      {"data.highlight_prob", "double", "0.3", 0, 1, "",
       "probability that a scene receives a highlight"},
      {"data.per_pixel_transmission", "bool", "false", 0, 0, "",
       "vary haze transmission smoothly across the image"},
  };
  return s;
}

const ConfigEntry& find_entry(const std::string& key) {
  for (const auto& e : schema_table())
    if (key == e.key) return e;
  throw ConfigError("unknown key '" + key + "'");
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double_strict(const std::string& key, const std::string& tok) {
  const std::string t = trim(tok);
  if (t.empty()) throw ConfigError(key + ": empty number");
  double v = 0;
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size())
    throw ConfigError(key + ": '" + t + "' is not a number");
  if (!std::isfinite(v)) throw ConfigError(key + ": value must be finite");
  return v;
}

std::int64_t parse_int_strict(const std::string& key, const std::string& tok) {
  const std::string t = trim(tok);
  std::int64_t v = 0;
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size())
    throw ConfigError(key + ": '" + t + "' is not an integer");
  return v;
}

void check_range(const std::string& key, double v, const ConfigEntry& e) {
  if (v < e.lo || v > e.hi)
    throw ConfigError(key + ": value " + fmt_double(v) + " out of range [" +
                      fmt_double(e.lo) + ", " + fmt_double(e.hi) + "]");
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// Validates `value` against the schema entry and returns the canonical text.
std::string canonicalize(const ConfigEntry& e, const std::string& value) {
  const std::string key = e.key;
  const std::string kind = e.kind;
  const std::string v = trim(value);
  if (kind == "int") {
    std::int64_t n = parse_int_strict(key, v);
    check_range(key, static_cast<double>(n), e);
    return std::to_string(n);
  }
  if (kind == "double") {
    double d = parse_double_strict(key, v);
    check_range(key, d, e);
    return fmt_double(d);
  }
  if (kind == "bool") {
    if (v == "true" || v == "false") return v;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }
  if (kind == "enum") {
    for (const auto& opt : split_commas([&] {
           std::string o = e.options;
           std::replace(o.begin(), o.end(), '|', ',');
           return o;
         }()))
      if (v == opt) return v;
    throw ConfigError(key + ": '" + v + "' is not one of {" +
                      std::string(e.options) + "}");
  }
  if (kind == "string") {
    if (v.empty()) throw ConfigError(key + ": value must not be empty");
    return v;
  }
  if (kind == "ints" || kind == "doubles" || kind == "range") {
    auto toks = split_commas(v);
    size_t want = static_cast<size_t>(parse_int_strict(key, e.options));
    if (want != 0 && toks.size() != want)
      throw ConfigError(key + ": expected " + std::to_string(want) +
                        " comma-separated values, got " +
                        std::to_string(toks.size()));
    if (toks.empty() || (toks.size() == 1 && trim(toks[0]).empty()))
      throw ConfigError(key + ": list must not be empty");
    std::string out;
    std::vector<double> nums;
    for (const auto& t : toks) {
      if (kind == "ints") {
        std::int64_t n = parse_int_strict(key, t);
        check_range(key, static_cast<double>(n), e);
        nums.push_back(static_cast<double>(n));
        if (!out.empty()) out += ',';
        out += std::to_string(n);
      } else {
        double d = parse_double_strict(key, t);
        check_range(key, d, e);
        nums.push_back(d);
        if (!out.empty()) out += ',';
        out += fmt_double(d);
      }
    }
    if (kind == "range" && nums[0] > nums[1])
      throw ConfigError(key + ": range low " + fmt_double(nums[0]) +
                        " exceeds high " + fmt_double(nums[1]));
    return out;
  }
  throw Error(std::string("config schema has unhandled kind '") + e.kind + "'");
}

}  // namespace

const std::vector<ConfigEntry>& Config::schema() { return schema_table(); }

Config Config::defaults() {
  Config c;
  for (const auto& e : schema_table()) c.values_[e.key] = e.def;
  return c;
}

void Config::set(const std::string& key, const std::string& value) {
  const ConfigEntry& e = find_entry(key);
  values_[key] = canonicalize(e, value);
}

Config Config::from_text(const std::string& text,
                         const std::vector<std::string>& overrides) {
  Config c = defaults();
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) +
                        ": expected 'key = value', got '" + t + "'");
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": missing key");
    try {
      c.set(key, val);
    } catch (const ConfigError& err) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + err.what());
    }
  }
  for (const auto& ov : overrides) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + ov + "': expected key=value");
    c.set(trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
  }
  return c;
}

Config Config::from_file(const std::string& path,
                         const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str(), overrides);
}

const std::string& Config::raw(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) {
    find_entry(key);  // unknown key gets the precise error
    throw Error("config value missing for known key '" + key + "'");
  }
  return it->second;
}

std::int64_t Config::get_int(const std::string& key) const {
  return parse_int_strict(key, raw(key));
}

double Config::get_double(const std::string& key) const {
  return parse_double_strict(key, raw(key));
}

bool Config::get_bool(const std::string& key) const { return raw(key) == "true"; }

const std::string& Config::get_string(const std::string& key) const {
  return raw(key);
}

std::vector<std::int64_t> Config::get_ints(const std::string& key) const {
  std::vector<std::int64_t> out;
  for (const auto& t : split_commas(raw(key)))
    out.push_back(parse_int_strict(key, t));
  return out;
}

std::vector<double> Config::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& t : split_commas(raw(key)))
    out.push_back(parse_double_strict(key, t));
  return out;
}

std::string Config::canonical_text() const {
  std::string out;
  for (const auto& [k, v] : values_) {  // std::map iterates sorted
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

std::array<unsigned char, 32> Config::digest() const {
  std::string text = canonical_text();
  std::array<unsigned char, 32> md{};
  unsigned int len = 0;
  if (!EVP_Digest(text.data(), text.size(), md.data(), &len, EVP_sha256(),
                  nullptr) ||
      len != 32)
    throw Error("SHA-256 digest computation failed");
  return md;
}

std::string Config::digest_hex() const {
  auto md = digest();
  std::string out(64, '0');
  static const char* hex = "0123456789abcdef";
  for (size_t i = 0; i < md.size(); ++i) {
    out[2 * i] = hex[md[i] >> 4];
    out[2 * i + 1] = hex[md[i] & 0xf];
  }
  return out;
}

std::string Config::help_text() {
  std::string out = "configuration keys (key = value lines, '#' comments):\n";
  for (const auto& e : schema_table()) {
    out += "  ";
    out += e.key;
    out += " (";
    out += e.kind;
    if (std::string(e.kind) == "enum") {
      out += ": ";
      out += e.options;
    }
    out += ", default ";
    out += e.def;
    out += ")\n      ";
    out += e.help;
    out += '\n';
  }
  return out;
}

}  // namespace dpnet

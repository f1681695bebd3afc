// Flat key=value configuration with a fixed schema: every key has a
// documented default, typed validation, and a canonical rendering so that
// semantically equal configs hash to the same digest.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dpnet/common.hpp"

namespace dpnet {

struct ConfigEntry {
  const char* key;
  const char* kind;  // int | double | bool | enum | string | ints | doubles | range
  const char* def;   // canonical default text
  double lo, hi;     // inclusive numeric bounds (elements for list kinds)
  const char* options;  // enum: options separated by '|'; list kinds: required
                        // element count as text, "0" meaning any
  const char* help;
};

class Config {
 public:
  static const std::vector<ConfigEntry>& schema();
  static Config defaults();
  // Parses `key = value` lines ('#' comments, blank lines allowed), then
  // applies overrides of the form "key=value" in order.
  static Config from_text(const std::string& text,
                          const std::vector<std::string>& overrides = {});
  static Config from_file(const std::string& path,
                          const std::vector<std::string>& overrides = {});

  void set(const std::string& key, const std::string& value);

  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  const std::string& get_string(const std::string& key) const;
  std::vector<std::int64_t> get_ints(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;

  // Sorted "key = value" lines covering every key.
  std::string canonical_text() const;
  std::array<unsigned char, 32> digest() const;
  std::string digest_hex() const;

  // One line per key with kind, default and description.
  static std::string help_text();

 private:
  const std::string& raw(const std::string& key) const;
  std::map<std::string, std::string> values_;
};

}  // namespace dpnet

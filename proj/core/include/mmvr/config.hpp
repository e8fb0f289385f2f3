#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmvr {

// Flat key-value tree with dotted paths ("masking.p = 0.8"). One assignment
// per line, '#' starts a comment. Typed getters throw ConfigError naming the
// offending key.
class Config {
 public:
  Config() = default;

  static Config parse_file(const std::string& path);
  static Config parse_string(std::string_view text, std::string_view origin = "<string>");

  // "a.b.c=value" as given on the command line
  void apply_override(std::string_view assignment);

  void set(std::string key, std::string value);
  bool has(std::string_view key) const;

  std::string get_string(std::string_view key) const;
  std::string get_string(std::string_view key, std::string_view fallback) const;
  std::int64_t get_int(std::string_view key, std::int64_t fallback) const;
  double get_double(std::string_view key, double fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;
  std::vector<std::string> get_list(std::string_view key, const std::vector<std::string>& fallback) const;
  std::vector<double> get_double_list(std::string_view key, const std::vector<double>& fallback) const;

  // Throws ConfigError on the first key not present in `known`.
  void require_known_keys(std::span<const std::string_view> known) const;

  // Sorted "key = value" lines; parse_string(serialize()) round-trips.
  std::string serialize() const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace mmvr

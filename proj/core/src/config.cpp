#include "mmvr/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "mmvr/errors.hpp"

namespace mmvr {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string> split_commas(std::string_view v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const std::size_t comma = v.find(',', start);
    const std::string_view piece = v.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    out.emplace_back(trim(piece));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (!out.empty() && out.back().empty()) out.pop_back();
  return out;
}

}  // namespace

Config Config::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("config file not found: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str(), path);
}

Config Config::parse_string(std::string_view text, std::string_view origin) {
  Config cfg;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t eol = text.find('\n', pos);
    std::string_view line = text.substr(pos, eol == std::string_view::npos ? std::string_view::npos : eol - pos);
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (!line.empty()) {
      const std::size_t eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key = value', got '" +
                          std::string(line) + "'");
      }
      const std::string key{trim(line.substr(0, eq))};
      const std::string value{trim(line.substr(eq + 1))};
      if (key.empty()) {
        throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
      }
      cfg.entries_[key] = value;
    }
    if (eol == std::string_view::npos) break;
    pos = eol + 1;
  }
  return cfg;
}

void Config::apply_override(std::string_view assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override must look like key.path=value, got '" + std::string(assignment) + "'");
  }
  const std::string key{trim(assignment.substr(0, eq))};
  if (key.empty()) throw ConfigError("override with empty key: '" + std::string(assignment) + "'");
  entries_[key] = std::string(trim(assignment.substr(eq + 1)));
}

void Config::set(std::string key, std::string value) { entries_[std::move(key)] = std::move(value); }

bool Config::has(std::string_view key) const { return entries_.find(std::string(key)) != entries_.end(); }

std::string Config::get_string(std::string_view key) const {
  const auto it = entries_.find(std::string(key));
  if (it == entries_.end()) throw ConfigError("missing config key: " + std::string(key));
  return it->second;
}

std::string Config::get_string(std::string_view key, std::string_view fallback) const {
  const auto it = entries_.find(std::string(key));
  return it == entries_.end() ? std::string(fallback) : it->second;
}

std::int64_t Config::get_int(std::string_view key, std::int64_t fallback) const {
  const auto it = entries_.find(std::string(key));
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError(std::string(key) + ": expected integer, got '" + v + "'");
  }
  return out;
}

double Config::get_double(std::string_view key, double fallback) const {
  const auto it = entries_.find(std::string(key));
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  try {
    std::size_t consumed = 0;
    const double out = std::stod(v, &consumed);
    if (consumed != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(std::string(key) + ": expected number, got '" + v + "'");
  }
}

bool Config::get_bool(std::string_view key, bool fallback) const {
  const auto it = entries_.find(std::string(key));
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(std::string(key) + ": expected boolean, got '" + v + "'");
}

std::vector<std::string> Config::get_list(std::string_view key, const std::vector<std::string>& fallback) const {
  const auto it = entries_.find(std::string(key));
  if (it == entries_.end()) return fallback;
  return split_commas(it->second);
}

std::vector<double> Config::get_double_list(std::string_view key, const std::vector<double>& fallback) const {
  const auto it = entries_.find(std::string(key));
  if (it == entries_.end()) return fallback;
  std::vector<double> out;
  for (const std::string& piece : split_commas(it->second)) {
    try {
      std::size_t consumed = 0;
      out.push_back(std::stod(piece, &consumed));
      if (consumed != piece.size()) throw std::invalid_argument(piece);
    } catch (const std::exception&) {
      throw ConfigError(std::string(key) + ": expected number list, got '" + it->second + "'");
    }
  }
  return out;
}

void Config::require_known_keys(std::span<const std::string_view> known) const {
  for (const auto& [key, value] : entries_) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config key: " + key);
    }
  }
}

std::string Config::serialize() const {
  std::string out;
  for (const auto& [key, value] : entries_) {  // std::map keeps keys sorted
    out += key;
    out += " = ";
    out += value;
    out += '\n';
  }
  return out;
}

}  // namespace mmvr

#pragma once

// Line-oriented "key = value" configuration with optional [section] headers.
// Keys inside a section are addressed as "section.key". '#' starts a comment.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "quadnet/geometry.hpp"

namespace quadnet {

class Config {
 public:
  Config() = default;

  static Config parse(std::istream& is, const std::string& origin = "<config>") {
    Config c;
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = trim(line);
      if (line.empty()) continue;
      auto where = [&] { return origin + ":" + std::to_string(lineno); };
      if (line.front() == '[') {
        if (line.back() != ']') throw Error(where() + ": malformed section header");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos) throw Error(where() + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw Error(where() + ": empty key");
      if (!section.empty()) key = section + "." + key;
      if (c.values_.count(key)) throw Error(where() + ": duplicate key '" + key + "'");
      c.values_[key] = trim(line.substr(eq + 1));
    }
    return c;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open config " + path.string());
    return parse(is, path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw Error("missing config key '" + key + "'");
    return it->second;
  }

  template <class U>
  U get(const std::string& key) const {
    const std::string s = get_string(key);
    U v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw Error("config key '" + key + "': cannot parse '" + s + "'");
    }
    return v;
  }

  template <class U>
  U get_or(const std::string& key, U fallback) const {
    return has(key) ? get<U>(key) : fallback;
  }

  // Misspelled keys must not silently fall back to defaults.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_) {
      if (!known.count(k)) throw Error("unknown config key '" + k + "'");
    }
  }

  // Sorted, canonical text; stable input for hashing.
  std::string serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
  }

  // 64-bit FNV-1a of the canonical text.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : serialize()) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    return h;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  std::map<std::string, std::string> values_;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

inline const std::set<std::string>& geometry_keys() {
  static const std::set<std::string> keys = {
      "geometry.source_to_center", "geometry.num_views",  "geometry.num_detectors", "geometry.detector_spacing",
      "geometry.image_size",       "geometry.pixel_spacing", "geometry.angular_range", "geometry.start_angle"};
  return keys;
}

// Fields missing from the config keep the values of `base`.
inline FanBeamGeometry geometry_from_config(const Config& c, FanBeamGeometry base = FanBeamGeometry::desk()) {
  base.source_to_center = c.get_or("geometry.source_to_center", base.source_to_center);
  base.num_views = c.get_or("geometry.num_views", base.num_views);
  base.num_detectors = c.get_or("geometry.num_detectors", base.num_detectors);
  base.detector_spacing = c.get_or("geometry.detector_spacing", base.detector_spacing);
  base.image_size = c.get_or("geometry.image_size", base.image_size);
  base.pixel_spacing = c.get_or("geometry.pixel_spacing", base.pixel_spacing);
  base.angular_range = c.get_or("geometry.angular_range", base.angular_range);
  base.start_angle = c.get_or("geometry.start_angle", base.start_angle);
  base.validate();
  return base;
}

inline void geometry_to_config(const FanBeamGeometry& g, Config& c) {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  c.set("geometry.source_to_center", num(g.source_to_center));
  c.set("geometry.num_views", std::to_string(g.num_views));
  c.set("geometry.num_detectors", std::to_string(g.num_detectors));
  c.set("geometry.detector_spacing", num(g.detector_spacing));
  c.set("geometry.image_size", std::to_string(g.image_size));
  c.set("geometry.pixel_spacing", num(g.pixel_spacing));
  c.set("geometry.angular_range", num(g.angular_range));
  c.set("geometry.start_angle", num(g.start_angle));
}

}  // namespace quadnet

// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_CONFIG_HPP_
#define DGTSE_CONFIG_HPP_

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgtse/common.hpp"

namespace dgtse {

// Flat key-value run configuration. One `key = value` pair per line, `#`
// starts a comment, later assignments win. CLI overrides use the same
// `key=value` form. Every run records the resolved table and its hash.

class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("config: cannot read " + path);
    KvConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!cfg.parse_line(line))
        throw ConfigError("config: bad line " + std::to_string(lineno) + " in " + path);
    }
    return cfg;
  }

  void apply_overrides(const std::vector<std::string>& overrides) {
    for (const auto& o : overrides)
      if (!parse_line(o))
        throw ConfigError("config: bad override '" + o + "' (want key=value)");
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& dflt) const {
    auto it = values_.find(key);
    return it == values_.end() ? dflt : it->second;
  }

  int64_t get_int(const std::string& key, int64_t dflt) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      size_t used = 0;
      int64_t v = std::stoll(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config: '" + key + "' is not an integer: " + it->second);
    }
  }

  double get_double(const std::string& key, double dflt) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      size_t used = 0;
      double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config: '" + key + "' is not a number: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool dflt) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config: '" + key + "' is not a boolean: " + it->second);
  }

  uint64_t get_seed(const std::string& key, uint64_t dflt) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      return std::stoull(it->second);
    } catch (const std::exception&) {
      throw ConfigError("config: '" + key + "' is not a seed: " + it->second);
    }
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  const std::map<std::string, std::string>& values() const { return values_; }

  // Order-independent content hash over the resolved table (std::map keeps
  // keys sorted), for the reproducibility record.
  uint64_t content_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [k, v] : values_) {
      h = fnv1a64(k.data(), k.size(), h);
      h = fnv1a64("=", 1, h);
      h = fnv1a64(v.data(), v.size(), h);
      h = fnv1a64("\n", 1, h);
    }
    return h;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

 private:
  // Returns false on malformed input; blank lines and comments are accepted.
  bool parse_line(const std::string& raw) {
    std::string line = raw;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const char* ws = " \t\r\n";
      auto b = s.find_first_not_of(ws);
      if (b == std::string::npos) return std::string();
      auto e = s.find_last_not_of(ws);
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) return true;
    auto eq = line.find('=');
    if (eq == std::string::npos) return false;
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) return false;
    values_[key] = value;
    return true;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace dgtse

#endif  // DGTSE_CONFIG_HPP_

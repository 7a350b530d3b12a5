#pragma once

// Flat `key = value` run configuration with dotted sections (one dot deep).
// Unknown keys are rejected by name against the schema; every getter
// materializes its default so a resolved config can be echoed in full.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cgraph/tensor.hpp"

namespace cgraph {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string accepted;  // human-readable domain
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"model.variant", "cgraph", "cgraph | proto"},
      {"model.image_size", "64", "positive multiple of model.patch"},
      {"model.patch", "4", "positive integer"},
      {"model.channels", "64", "positive multiple of 4"},
      {"model.subgraph_nodes", "64", "positive integer <= feature HW"},
      {"model.subgraph_gather", "true", "true | false"},
      {"spg.depth", "3", "positive integer"},
      {"spg.k", "9", "integer in [1, HW-1]"},
      {"cnc.delta", "0.2", "real in (0, ln 2)"},
      {"cnc.tau", "0.1", "positive real"},
      {"cnc.alpha", "0.01", "non-negative real"},
      {"train.iterations", "2000", "non-negative integer"},
      {"train.lr", "0.001", "positive real"},
      {"train.lr_decay", "0.95", "real in (0, 1]"},
      {"train.lr_decay_every", "1000", "positive integer"},
      {"train.seed", "0", "unsigned integer"},
      {"train.precision", "double", "double | single"},
      {"data.class_count", "4", "integer in [2, 6]"},
      {"data.train_domain", "A", "A | B"},
      {"data.train_classes", "1,2,3", "comma-separated class ids"},
      {"eval.domain", "B", "A | B"},
      {"eval.class", "4", "class id"},
      {"eval.episodes", "50", "positive integer"},
      {"eval.shots", "1", "positive integer"},
  };
  return schema;
}

class Config {
 public:
  Config() {
    for (const auto& k : config_schema()) values_[k.name] = k.default_value;
  }

  static Config from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path);
    Config cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      const auto trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ArgError("config line " + std::to_string(lineno) + " is not `key = value`: " + trimmed);
      cfg.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    for (const auto& k : config_schema()) {
      if (k.name == key) {
        values_[key] = value;
        return;
      }
    }
    std::string keys;
    for (const auto& k : config_schema()) keys += (keys.empty() ? "" : ", ") + k.name;
    throw ArgError("unknown config key '" + key + "'; accepted keys: " + keys);
  }

  const std::string& raw(const std::string& key) const { return values_.at(key); }

  long get_int(const std::string& key) const {
    try {
      return std::stol(raw(key));
    } catch (...) {
      throw bad_value(key);
    }
  }

  std::uint64_t get_u64(const std::string& key) const {
    try {
      return std::stoull(raw(key));
    } catch (...) {
      throw bad_value(key);
    }
  }

  double get_real(const std::string& key) const {
    try {
      return std::stod(raw(key));
    } catch (...) {
      throw bad_value(key);
    }
  }

  bool get_bool(const std::string& key) const {
    const auto& v = raw(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw bad_value(key);
  }

  std::vector<int> get_int_list(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(raw(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        out.push_back(std::stoi(trim(item)));
      } catch (...) {
        throw bad_value(key);
      }
    }
    if (out.empty()) throw bad_value(key);
    return out;
  }

  int domain_id(const std::string& key) const {
    const auto& v = raw(key);
    if (v == "A" || v == "a" || v == "0") return 0;
    if (v == "B" || v == "b" || v == "1") return 1;
    throw bad_value(key);
  }

  // All keys with defaults materialized, sorted, newline-terminated.
  std::string resolved() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  ArgError bad_value(const std::string& key) const {
    for (const auto& k : config_schema())
      if (k.name == key)
        return ArgError("invalid value '" + values_.at(key) + "' for config key '" + key +
                        "'; accepted: " + k.accepted);
    return ArgError("unknown config key '" + key + "'");
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;  // ordered for stable echo
};

}  // namespace cgraph

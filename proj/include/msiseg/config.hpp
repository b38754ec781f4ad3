#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msiseg/common.hpp"

namespace msiseg {

// Structured UTF-8 config text, used for run configs, scene specs and
// manifests:
//
//   # comment
//   key: value
//   block_name {
//     key: value
//   }
//
// Keys are [a-z0-9_]. Values run to end of line. Blocks do not nest.

struct ConfigBlock {
  std::string name;
  std::vector<std::pair<std::string, std::string>> entries;
};

struct Config {
  std::vector<std::pair<std::string, std::string>> entries;
  std::vector<ConfigBlock> blocks;

  void set(const std::string& key, const std::string& value) {
    for (auto& kv : entries) {
      if (kv.first == key) {
        kv.second = value;
        return;
      }
    }
    entries.emplace_back(key, value);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k) {
    if (!(std::islower(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) || c == '_'))
      return false;
  }
  return true;
}

}  // namespace detail

inline Config parse_config_text(const std::string& text, const std::string& origin = "<string>") {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  ConfigBlock* open_block = nullptr;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (t == "}") {
      if (!open_block) throw FormatError(where + ": unmatched '}'");
      open_block = nullptr;
      continue;
    }
    if (t.size() > 1 && t.back() == '{') {
      if (open_block) throw FormatError(where + ": nested blocks are not supported");
      std::string name = detail::trim(t.substr(0, t.size() - 1));
      if (!detail::valid_key(name)) throw FormatError(where + ": bad block name '" + name + "'");
      cfg.blocks.push_back(ConfigBlock{name, {}});
      open_block = &cfg.blocks.back();
      continue;
    }
    size_t colon = t.find(':');
    if (colon == std::string::npos) throw FormatError(where + ": expected 'key: value'");
    std::string key = detail::trim(t.substr(0, colon));
    std::string value = detail::trim(t.substr(colon + 1));
    if (!detail::valid_key(key)) throw FormatError(where + ": bad key '" + key + "'");
    if (open_block)
      open_block->entries.emplace_back(key, value);
    else
      cfg.entries.emplace_back(key, value);
  }
  if (open_block) throw FormatError(origin + ": unterminated block '" + open_block->name + "'");
  return cfg;
}

inline Config load_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

inline std::string serialize_config(const Config& cfg) {
  std::ostringstream out;
  for (const auto& kv : cfg.entries) out << kv.first << ": " << kv.second << "\n";
  for (const auto& b : cfg.blocks) {
    out << b.name << " {\n";
    for (const auto& kv : b.entries) out << "  " << kv.first << ": " << kv.second << "\n";
    out << "}\n";
  }
  return out.str();
}

inline double parse_real(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw FormatError(what + ": bad real value '" + s + "'");
  return v;
}

inline int64_t parse_int(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0') throw FormatError(what + ": bad integer value '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& what) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw FormatError(what + ": bad boolean value '" + s + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(detail::trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!detail::trim(cur).empty() || !out.empty()) out.push_back(detail::trim(cur));
  return out;
}

inline std::vector<double> parse_real_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const auto& tok : split_list(s)) out.push_back(parse_real(tok, what));
  return out;
}

inline std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
  std::vector<int> out;
  for (const auto& tok : split_list(s)) out.push_back(static_cast<int>(parse_int(tok, what)));
  return out;
}

// Strict key consumer. Callers take the keys they understand; finish() rejects
// anything left over so typos in config files fail loudly.
class ConfigView {
 public:
  explicit ConfigView(const std::vector<std::pair<std::string, std::string>>& entries,
                      std::string context)
      : context_(std::move(context)) {
    for (const auto& kv : entries) values_[kv.first] = kv.second;  // last writer wins
  }
  explicit ConfigView(const Config& cfg, std::string context = "config")
      : ConfigView(cfg.entries, std::move(context)) {}
  explicit ConfigView(const ConfigBlock& block)
      : ConfigView(block.entries, "block '" + block.name + "'") {}

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string take_string(const std::string& key, const std::string& dflt) {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    consumed_.insert(key);
    return it->second;
  }
  std::string take_required(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ArgumentError(context_ + ": missing required key '" + key + "'");
    consumed_.insert(key);
    return it->second;
  }
  int64_t take_int(const std::string& key, int64_t dflt) {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    consumed_.insert(key);
    return parse_int(it->second, key);
  }
  double take_real(const std::string& key, double dflt) {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    consumed_.insert(key);
    return parse_real(it->second, key);
  }
  bool take_bool(const std::string& key, bool dflt) {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    consumed_.insert(key);
    return parse_bool(it->second, key);
  }
  std::vector<double> take_real_list(const std::string& key, std::vector<double> dflt = {}) {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    consumed_.insert(key);
    return parse_real_list(it->second, key);
  }
  std::vector<int> take_int_list(const std::string& key, std::vector<int> dflt = {}) {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    consumed_.insert(key);
    return parse_int_list(it->second, key);
  }

  void finish() const {
    std::vector<std::string> unknown;
    for (const auto& kv : values_)
      if (!consumed_.count(kv.first)) unknown.push_back(kv.first);
    if (!unknown.empty()) {
      std::string msg = context_ + ": unknown key(s):";
      for (const auto& k : unknown) msg += " '" + k + "'";
      throw ArgumentError(msg);
    }
  }

 private:
  std::string context_;
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

// Shortest decimal form that round-trips a double exactly.
inline std::string format_real(double v) {
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace msiseg

#pragma once

// Plain-text key-value configuration: one `key = value` pair per line, `#`
// starts a comment, blank lines ignored. Values keep interior spaces but are
// trimmed at the ends. Accessors remember which keys were read so callers
// can flag typos via unused_keys().

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace upliftlab {

class KeyValueConfig {
 public:
  static KeyValueConfig parse_string(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string stripped = strip_comment(line);
      const std::string trimmed = trim(stripped);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("config line " + std::to_string(line_no) +
                                 ": expected 'key = value', got '" + trimmed + "'");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw std::runtime_error("config line " + std::to_string(line_no) + ": empty key");
      if (cfg.values_.count(key))
        throw std::runtime_error("config line " + std::to_string(line_no) + ": duplicate key '" +
                                 key + "'");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream body;
    body << in.rdbuf();
    return parse_string(body.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback = "") const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    accessed_.insert(key);
    return it->second;
  }

  long get_int(const std::string& key, long fallback) const {
    return parse_with<long>(key, fallback, "integer", [](const std::string& s, std::size_t* pos) {
      return std::stol(s, pos);
    });
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    return parse_with<std::uint64_t>(key, fallback, "unsigned integer",
                                     [](const std::string& s, std::size_t* pos) {
                                       return std::stoull(s, pos);
                                     });
  }

  double get_double(const std::string& key, double fallback) const {
    return parse_with<double>(key, fallback, "number", [](const std::string& s, std::size_t* pos) {
      return std::stod(s, pos);
    });
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    accessed_.insert(key);
    const std::string& v = it->second;
    if (v == "true" || v == "yes" || v == "1" || v == "on") return true;
    if (v == "false" || v == "no" || v == "0" || v == "off") return false;
    throw std::runtime_error("config key '" + key + "': expected a boolean, got '" + v + "'");
  }

  // comma-separated list; empty value gives the fallback
  std::vector<std::string> get_list(const std::string& key,
                                    const std::vector<std::string>& fallback = {}) const {
    const auto it = values_.find(key);
    if (it == values_.end() || trim(it->second).empty()) return fallback;
    accessed_.insert(key);
    std::vector<std::string> out;
    std::string cur;
    for (char c : it->second) {
      if (c == ',') {
        out.push_back(trim(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    out.push_back(trim(cur));
    return out;
  }

  std::vector<std::uint64_t> get_u64_list(const std::string& key,
                                          const std::vector<std::uint64_t>& fallback = {}) const {
    if (!has(key)) return fallback;
    std::vector<std::uint64_t> out;
    for (const std::string& s : get_list(key)) {
      try {
        std::size_t pos = 0;
        out.push_back(std::stoull(s, &pos));
        if (pos != s.size()) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "': bad list entry '" + s + "'");
      }
    }
    return out;
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) out.push_back(k);
    return out;
  }

  // keys present in the file but never read; useful for typo detection
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!accessed_.count(k)) out.push_back(k);
    return out;
  }

 private:
  template <typename T, typename Fn>
  T parse_with(const std::string& key, T fallback, const char* what, Fn&& convert) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    accessed_.insert(key);
    try {
      std::size_t pos = 0;
      const T v = convert(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error("config key '" + key + "': expected " + std::string(what) +
                               ", got '" + it->second + "'");
    }
  }

  static std::string strip_comment(const std::string& line) {
    const std::size_t hash = line.find('#');
    return hash == std::string::npos ? line : line.substr(0, hash);
  }

  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> accessed_;
};

}  // namespace upliftlab

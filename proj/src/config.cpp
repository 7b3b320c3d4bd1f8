#include "occflow/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

extern "C" char** environ;

namespace occflow {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  std::string last = trim(cur);
  if (!last.empty()) out.push_back(last);
  return out;
}

}  // namespace

Config Config::parse(const std::string& text) {
  Config c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    c.values_[key] = val;
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

void Config::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write config: " + path);
  os << to_text();
}

void Config::set(const std::string& key, const std::string& value) { values_[key] = value; }

void Config::set_double(const std::string& key, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  values_[key] = buf;
}

void Config::set_int(const std::string& key, int64_t v) { values_[key] = std::to_string(v); }

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

int64_t Config::get_int(const std::string& key, int64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  size_t pos = 0;
  int64_t v = std::stoll(it->second, &pos);
  if (pos != it->second.size()) throw std::invalid_argument("config key " + key + ": not an integer");
  return v;
}

double Config::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  size_t pos = 0;
  double v = std::stod(it->second, &pos);
  if (pos != it->second.size()) throw std::invalid_argument("config key " + key + ": not a number");
  return v;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config key " + key + ": not a boolean");
}

std::vector<double> Config::get_double_list(const std::string& key,
                                            const std::vector<double>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<double> out;
  for (const auto& s : split_list(it->second)) out.push_back(std::stod(s));
  return out;
}

std::vector<std::string> Config::get_str_list(const std::string& key,
                                              const std::vector<std::string>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  return split_list(it->second);
}

std::vector<int64_t> Config::get_int_list(const std::string& key,
                                          const std::vector<int64_t>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<int64_t> out;
  for (const auto& s : split_list(it->second)) out.push_back(std::stoll(s));
  return out;
}

void Config::apply_env_overrides(const char* prefix) {
  size_t plen = std::string(prefix).size();
  for (char** e = environ; *e != nullptr; ++e) {
    std::string entry(*e);
    if (entry.compare(0, plen, prefix) != 0) continue;
    size_t eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string name = entry.substr(plen, eq - plen);
    std::string value = entry.substr(eq + 1);
    // '__' separates path components
    std::string key;
    for (size_t i = 0; i < name.size(); ++i) {
      if (i + 1 < name.size() && name[i] == '_' && name[i + 1] == '_') {
        key += '.';
        ++i;
      } else {
        key += name[i];
      }
    }
    values_[key] = value;
  }
}

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string Config::canonical_hash() const {
  uint64_t h = 14695981039346656037ULL;
  for (const auto& [k, v] : values_) {  // std::map iterates sorted
    std::string line = k + "=" + v + "\n";
    h = fnv1a64(line.data(), line.size(), h);
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string Config::to_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

}  // namespace occflow

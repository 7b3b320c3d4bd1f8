#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace occflow {

// Flat key/value configuration with dotted paths ("cfm.nfe = 10"). Keys are
// kept sorted, so the canonical hash is stable under reordering. Environment
// variables override entries as OCCFLOW_<path with '.' replaced by '__'>.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text);
  static Config load(const std::string& path);
  void save(const std::string& path) const;

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value);
  void set_double(const std::string& key, double v);
  void set_int(const std::string& key, int64_t v);

  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback) const;
  std::vector<std::string> get_str_list(const std::string& key,
                                        const std::vector<std::string>& fallback) const;
  std::vector<int64_t> get_int_list(const std::string& key,
                                    const std::vector<int64_t>& fallback) const;

  // OCCFLOW_cfm__nfe=20 overrides key "cfm.nfe".
  void apply_env_overrides(const char* prefix = "OCCFLOW_");

  // FNV-1a 64 over the sorted "key=value\n" lines, hex encoded.
  std::string canonical_hash() const;
  std::string to_text() const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 14695981039346656037ULL);

}  // namespace occflow

#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mobo {

// Raised for malformed configuration values or files.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key/value configuration.  Files hold one "section.key = value" pair per
// line; '#' starts a comment; blank lines are ignored.  CLI overrides call
// set() after from_file(), so the last writer wins.
class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path);

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string get_str(const std::string& key, const std::string& def) const;
  double get_double(const std::string& key, double def) const;
  int get_int(const std::string& key, int def) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const;
  // Comma-separated list of doubles.
  std::vector<double> get_list(const std::string& key, const std::vector<double>& def) const;

  const std::map<std::string, std::string>& items() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace mobo

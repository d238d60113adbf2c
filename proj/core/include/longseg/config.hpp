#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "longseg/error.hpp"

namespace longseg {

/// Flat `key = value` configuration. One pair per line, `#` starts a comment,
/// blank lines are skipped. Keys may repeat: scalar getters take the last
/// occurrence, get_all returns every occurrence in file order.
class Config {
 public:
  static Config parse_file(const std::string& path);
  static Config parse_string(const std::string& text, const std::string& source = "<string>");

  bool has(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Value split on whitespace and commas, every token parsed as a real.
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key,
                                  const std::vector<double>& fallback) const;

  /// Every occurrence of the key, in file order.
  std::vector<std::string> get_all(const std::string& key) const;

  /// Keys in first-appearance order, without duplicates.
  std::vector<std::string> keys() const;

  /// Appends a pair, as if one more line had been read.
  void set(const std::string& key, const std::string& value);

  const std::string& source() const { return source_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::string source_ = "<none>";
};

/// Splits a config value on whitespace and commas.
std::vector<std::string> split_tokens(const std::string& value);

}  // namespace longseg

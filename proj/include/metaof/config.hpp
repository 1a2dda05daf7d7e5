#pragma once

// Flat "section.key = value" configuration files.
//
//   # comment
//   experiment.kind = sinusoid
//   train.inner_lr  = 0.01
//   train.eval_steps = 0,1,2,3
//
// Keys are unique; later duplicates are an error. Values are kept as strings
// and converted on access so that field-level errors name the offending key.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace metaof::config {

class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text, const std::string& origin = "<string>");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  [[nodiscard]] bool has(const std::string& key) const { return values_.contains(key); }
  [[nodiscard]] const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<std::int64_t> get_ints(const std::string& key, const std::vector<std::int64_t>& fallback) const;
  /// Value must be one of `allowed`.
  std::string get_choice(const std::string& key, const std::string& fallback,
                         const std::vector<std::string>& allowed) const;

  /// Sorted "key = value" lines; the basis of hash().
  [[nodiscard]] std::string canonical() const;
  /// Hex SHA-256 of canonical().
  [[nodiscard]] std::string hash() const;

  /// Keys that were never read through a getter (likely typos).
  [[nodiscard]] std::vector<std::string> unused_keys() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> read_;
};

}  // namespace metaof::config

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ognet/tensor.hpp"

namespace ognet {

/// Ordered key=value settings. Blank lines and lines starting with '#' are
/// ignored; later keys override earlier ones.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::filesystem::path& path);
  std::string format() const;
  void save(const std::filesystem::path& path) const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void merge(const KeyValues& other);

  std::string get(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<Index> get_list(const std::string& key, const std::vector<Index>& fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

std::string format_list(const std::vector<Index>& values);

}  // namespace ognet

#pragma once

#include "dinolab/common.hpp"

#include <map>
#include <string>
#include <vector>

namespace dinolab {

// Flat key-value configuration parsed from an INI-style file with [section]
// headers; keys are addressed as "section.key". Command-line overrides use
// the same dotted form.
class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  // "section.key=value"
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  long get_int(const std::string& key, long fallback) const;
  double get_real(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key) const;  // comma separated
  std::array<float, 3> get_triple(const std::string& key, std::array<float, 3> fallback) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

  // Digest over the keys that define model identity (architecture, objective,
  // image size); training and scoring knobs deliberately excluded so e.g. a
  // different top-k percentage does not invalidate a checkpoint.
  std::uint64_t digest() const;

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace dinolab

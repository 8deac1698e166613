#include "dinolab/config.hpp"

#include <fstream>
#include <sstream>

namespace dinolab {
namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

void parse_into(std::istream& is, Config& cfg) {
  std::string line, section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": bad section header");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty section name");
      continue;
    }
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (section.empty()) throw ConfigError("line " + std::to_string(line_no) + ": key outside any [section]");
    cfg.set(section + "." + key, value);
  }
}

}  // namespace

Config Config::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  Config cfg;
  parse_into(is, cfg);
  return cfg;
}

Config Config::from_string(const std::string& text) {
  std::istringstream is(text);
  Config cfg;
  parse_into(is, cfg);
  return cfg;
}

void Config::apply_override(const std::string& assignment) {
  std::size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like section.key=value: " + assignment);
  std::string key = trim(assignment.substr(0, eq));
  std::string value = trim(assignment.substr(eq + 1));
  if (key.find('.') == std::string::npos)
    throw ConfigError("override key must be dotted (section.key): " + assignment);
  set(key, value);
}

void Config::set(const std::string& key, const std::string& value) { entries_[key] = value; }

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

long Config::get_int(const std::string& key, long fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    std::size_t pos = 0;
    long v = std::stol(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + ": expected integer, got '" + it->second + "'");
  }
}

double Config::get_real(const std::string& key, double fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    std::size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + ": expected number, got '" + it->second + "'");
  }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("key " + key + ": expected boolean, got '" + v + "'");
}

std::vector<int> Config::get_int_list(const std::string& key) const {
  auto it = entries_.find(key);
  std::vector<int> out;
  if (it == entries_.end()) return out;
  std::stringstream ss(it->second);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ConfigError("key " + key + ": expected integer list, got '" + it->second + "'");
    }
  }
  return out;
}

std::array<float, 3> Config::get_triple(const std::string& key,
                                        std::array<float, 3> fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  std::stringstream ss(it->second);
  std::string tok;
  std::array<float, 3> out{};
  for (int i = 0; i < 3; ++i) {
    if (!std::getline(ss, tok, ','))
      throw ConfigError("key " + key + ": expected three comma-separated values");
    out[static_cast<std::size_t>(i)] = std::stof(trim(tok));
  }
  return out;
}

std::uint64_t Config::digest() const {
  static const char* kPrefixes[] = {"encoder.", "bottleneck.", "decoder.", "objective."};
  std::string canon;
  for (const auto& [k, v] : entries_) {
    bool relevant = k == "data.image_size";
    for (const char* p : kPrefixes) relevant |= k.rfind(p, 0) == 0;
    if (relevant) canon += k + "=" + v + "\n";
  }
  return fnv1a64(canon);
}

}  // namespace dinolab

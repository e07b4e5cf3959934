#pragma once
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace maskseg {

// Flat `key = value` text grammar shared by config files, checkpoint headers
// and results files: one pair per line, `#` starts a comment, blank lines
// ignored.
inline std::string kv_trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::pair<std::string, std::string>> parse_kv_lines(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  size_t pos = 0;
  int lineno = 0;
  while (pos <= text.size()) {
    size_t end = text.find('\n', pos);
    std::string line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    pos = end == std::string::npos ? text.size() + 1 : end + 1;
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = kv_trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("line " + std::to_string(lineno) + ": expected `key = value`");
    std::string key = kv_trim(line.substr(0, eq));
    std::string value = kv_trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

}  // namespace maskseg

#pragma once

// Line-delimited JSON helpers shared by the file formats.

#include <fstream>
#include <functional>
#include <istream>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace lookback {

using json = nlohmann::json;

/// I/O failure (unreadable or unwritable path).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed record in an input file; `line` is 1-based.
class FormatError : public std::runtime_error {
 public:
  FormatError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for reading");
  return in;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  return out;
}

/// Calls `fn(line_number, record)` for each non-blank line. Parse failures
/// raise FormatError carrying the line number.
inline void for_each_jsonl(std::istream& in, const std::function<void(std::size_t, const json&)>& fn) {
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(n, std::string("invalid JSON: ") + e.what());
    }
    fn(n, j);
  }
}

/// Required string field; numbers are accepted and printed as integers when integral.
inline std::string string_field(const json& j, const char* key, std::size_t line) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(line, std::string("missing field '") + key + "'");
  const auto& v = j.at(key);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) return v.dump();
  throw FormatError(line, std::string("field '") + key + "' must be a string");
}

}  // namespace lookback

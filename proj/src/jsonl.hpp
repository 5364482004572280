#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "qure/error.hpp"

namespace qure::detail {

// Calls fn(json_object) for every non-blank line; errors carry file:line.
template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::Format, where + "not JSON: " + e.what());
    }
    if (!j.is_object()) throw Error(ErrorKind::Format, where + "not a JSON object");
    try {
      fn(j);
    } catch (const Error& e) {
      throw Error(e.kind(), where + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, where + e.what());
    }
  }
}

inline std::ofstream open_for_writing(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open for writing " + path.string());
  return out;
}

}  // namespace qure::detail

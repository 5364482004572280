#pragma once

#include <filesystem>
#include <string_view>

#include <json.hpp>

namespace qure {

// Flat TOML subset: `key = value` lines, `[table]` headers (one level),
// `#` comments, strings, integers, floats, booleans and single-line arrays
// of those. Throws Config with the offending line number.
nlohmann::json parse_toml(std::string_view text);

// .toml files go through parse_toml, everything else must be JSON.
nlohmann::json load_config_file(const std::filesystem::path& path);

}  // namespace qure

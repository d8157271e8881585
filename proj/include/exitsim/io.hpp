#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace exitsim {

/// Writes `contents` to a sibling temp file and renames it over `path`, so
/// readers never observe a partially written artifact.
void atomic_write(const std::filesystem::path& path, std::string_view contents);

std::string read_text(const std::filesystem::path& path);

/// "0.95,0.85" -> {0.95, 0.85}. Throws RangeError on malformed input.
std::vector<double> parse_real_list(std::string_view text);

std::string join_reals(const std::vector<double>& values, char sep = ',');

}  // namespace exitsim

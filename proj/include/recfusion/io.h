#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace recfusion {

// Writes `contents` to a sibling temporary file and renames it over `path`,
// so readers never observe a partially written file. Throws
// std::runtime_error on I/O failure (the temporary is removed).
void write_file_atomic(const std::filesystem::path& path,
                       std::string_view contents);

std::string read_file(const std::filesystem::path& path);

// Shortest round-trippable decimal representation of a double.
std::string format_double(double value);

}  // namespace recfusion

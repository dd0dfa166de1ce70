#pragma once

#include <filesystem>
#include <string>

namespace aulab {

// Writes via a temp file in the same directory, then renames into place.
// Creates parent directories as needed.
void atomic_write_file(const std::filesystem::path& path, const std::string& bytes);

std::string read_file(const std::filesystem::path& path);  // throws when absent

// Shortest round-trip decimal form, fixed across runs of the same build.
std::string format_double(double v);

}  // namespace aulab

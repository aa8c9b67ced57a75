#pragma once

#include <cstdint>
#include <string>

namespace marginlab {

// Write content to a temporary file in the target directory, then rename.
void write_file_atomic(const std::string& path, const std::string& content);

// Shortest-faithful decimal for a double: 17 significant digits.
std::string format17(double v);

// SplitMix64: cheap stateless stream splitter used to derive per-iteration
// RNG seeds from (seed, counter).
std::uint64_t splitmix64(std::uint64_t z);

}  // namespace marginlab

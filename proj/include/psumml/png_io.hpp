#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace psumml {

// Minimal PNG writer (8-bit gray or RGB, no filtering). Deterministic output
// for identical pixel data.
void write_png(const std::filesystem::path& path, int w, int h, int channels,
               const std::vector<std::uint8_t>& pixels);

}  // namespace psumml

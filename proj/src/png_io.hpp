#pragma once

#include <cstdint>
#include <filesystem>

#include "invflow/maps.hpp"

namespace invflow {

struct Rgb8 {
  uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb8&) const = default;
};
struct Rgb16 {
  uint16_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb16&) const = default;
};

using Gray8Raster = Grid<uint8_t>;
using Gray16Raster = Grid<uint16_t>;
using Rgb8Raster = Grid<Rgb8>;
using Rgb16Raster = Grid<Rgb16>;

// Strict single-format readers: the file must match the expected bit depth
// and color type exactly (kFormat otherwise, kIo on unreadable files).
Gray8Raster ReadGray8Png(const std::filesystem::path& path);
Gray16Raster ReadGray16Png(const std::filesystem::path& path);
Rgb8Raster ReadRgb8Png(const std::filesystem::path& path);
Rgb16Raster ReadRgb16Png(const std::filesystem::path& path);

void WritePng(const std::filesystem::path& path, const Gray8Raster& raster);
void WritePng(const std::filesystem::path& path, const Gray16Raster& raster);
void WritePng(const std::filesystem::path& path, const Rgb8Raster& raster);
void WritePng(const std::filesystem::path& path, const Rgb16Raster& raster);

}  // namespace invflow

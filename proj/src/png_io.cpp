#include "png_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

#include "invflow/error.hpp"

namespace invflow {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

// Keep libpng from printing to stderr; errors surface as exceptions.
void QuietError(png_structp png, png_const_charp) { png_longjmp(png, 1); }
void QuietWarning(png_structp, png_const_charp) {}

// Reads any of the four supported raster layouts into a contiguous
// host-endian buffer of bytes_per_pixel * width * height.
void ReadPngRaw(const std::filesystem::path& path, int expect_bit_depth,
                int expect_color_type, int bytes_per_pixel, int& width,
                int& height, std::vector<uint8_t>& bytes) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file)
    throw Error(ErrorCategory::kIo, "cannot open " + path.string());
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, QuietError, QuietWarning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCategory::kIo, "libpng allocation failed");
  }
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCategory::kFormat, "malformed PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (bit_depth != expect_bit_depth || color_type != expect_color_type ||
      png_get_interlace_type(png, info) != PNG_INTERLACE_NONE) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCategory::kFormat,
                "unexpected PNG layout in " + path.string());
  }
  if (bit_depth == 16) png_set_swap(png);  // file is big-endian
  const size_t stride = static_cast<size_t>(width) * bytes_per_pixel;
  bytes.resize(stride * height);
  rows.resize(height);
  for (int y = 0; y < height; ++y) rows[y] = bytes.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
}

void WritePngRaw(const std::filesystem::path& path, int width, int height,
                 int bit_depth, int color_type, int bytes_per_pixel,
                 const uint8_t* bytes) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file)
    throw Error(ErrorCategory::kIo, "cannot write " + path.string());
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, QuietError, QuietWarning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCategory::kIo, "libpng allocation failed");
  }
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCategory::kIo, "PNG write failed: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  const size_t stride = static_cast<size_t>(width) * bytes_per_pixel;
  rows.resize(height);
  for (int y = 0; y < height; ++y)
    rows[y] = const_cast<png_bytep>(bytes + stride * y);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Gray8Raster ReadGray8Png(const std::filesystem::path& path) {
  int w, h;
  std::vector<uint8_t> bytes;
  ReadPngRaw(path, 8, PNG_COLOR_TYPE_GRAY, 1, w, h, bytes);
  Gray8Raster out(w, h);
  std::memcpy(out.Data(), bytes.data(), bytes.size());
  return out;
}

Gray16Raster ReadGray16Png(const std::filesystem::path& path) {
  int w, h;
  std::vector<uint8_t> bytes;
  ReadPngRaw(path, 16, PNG_COLOR_TYPE_GRAY, 2, w, h, bytes);
  Gray16Raster out(w, h);
  std::memcpy(out.Data(), bytes.data(), bytes.size());
  return out;
}

Rgb8Raster ReadRgb8Png(const std::filesystem::path& path) {
  int w, h;
  std::vector<uint8_t> bytes;
  ReadPngRaw(path, 8, PNG_COLOR_TYPE_RGB, 3, w, h, bytes);
  Rgb8Raster out(w, h);
  std::memcpy(out.Data(), bytes.data(), bytes.size());
  return out;
}

Rgb16Raster ReadRgb16Png(const std::filesystem::path& path) {
  int w, h;
  std::vector<uint8_t> bytes;
  ReadPngRaw(path, 16, PNG_COLOR_TYPE_RGB, 6, w, h, bytes);
  Rgb16Raster out(w, h);
  std::memcpy(out.Data(), bytes.data(), bytes.size());
  return out;
}

void WritePng(const std::filesystem::path& path, const Gray8Raster& raster) {
  WritePngRaw(path, raster.Width(), raster.Height(), 8, PNG_COLOR_TYPE_GRAY, 1,
              raster.Data());
}

void WritePng(const std::filesystem::path& path, const Gray16Raster& raster) {
  WritePngRaw(path, raster.Width(), raster.Height(), 16, PNG_COLOR_TYPE_GRAY, 2,
              reinterpret_cast<const uint8_t*>(raster.Data()));
}

void WritePng(const std::filesystem::path& path, const Rgb8Raster& raster) {
  WritePngRaw(path, raster.Width(), raster.Height(), 8, PNG_COLOR_TYPE_RGB, 3,
              reinterpret_cast<const uint8_t*>(raster.Data()));
}

void WritePng(const std::filesystem::path& path, const Rgb16Raster& raster) {
  WritePngRaw(path, raster.Width(), raster.Height(), 16, PNG_COLOR_TYPE_RGB, 6,
              reinterpret_cast<const uint8_t*>(raster.Data()));
}

}  // namespace invflow

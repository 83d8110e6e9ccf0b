#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mkis/error.hpp"

namespace mkis {

// Decoded raster: interleaved HWC floats in [0, 1]. Grayscale images decode
// to c = 1; alpha channels are dropped.
struct ImageF {
  int64_t h = 0;
  int64_t w = 0;
  int64_t c = 0;
  std::vector<float> v;

  float at(int64_t y, int64_t x, int64_t ch) const { return v[(y * w + x) * c + ch]; }
  float& at(int64_t y, int64_t x, int64_t ch) { return v[(y * w + x) * c + ch]; }
};

// Dispatches on magic bytes: PNG (8/16-bit gray, gray+alpha, RGB, RGBA,
// palette; no interlace), binary PGM/PPM (8/16-bit), BMP (8-bit palette,
// 24/32-bit uncompressed). Throws IoError if the file cannot be read and
// DataError for unsupported or corrupt content.
ImageF decode_image(const std::string& path);

// Same decoder over an in-memory buffer; `origin` names the source in errors.
ImageF decode_image_bytes(const unsigned char* data, size_t size, const std::string& origin);

// Minimal PNG writers (single IDAT, no filtering beyond type 0).
void write_png_gray8(const std::string& path, int64_t h, int64_t w, const uint8_t* data);
void write_png_gray16(const std::string& path, int64_t h, int64_t w, const uint16_t* data);
void write_png_rgb8(const std::string& path, int64_t h, int64_t w, const uint8_t* rgb);

}  // namespace mkis

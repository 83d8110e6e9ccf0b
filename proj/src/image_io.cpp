#include "mkis/image_io.hpp"

#include <zlib.h>

#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mkis {

namespace {

[[noreturn]] void corrupt(const std::string& origin, const std::string& why) {
  throw DataError("corrupt image '" + origin + "': " + why);
}

uint32_t be32(const unsigned char* p) {
  return uint32_t(p[0]) << 24 | uint32_t(p[1]) << 16 | uint32_t(p[2]) << 8 | uint32_t(p[3]);
}
uint16_t be16(const unsigned char* p) { return uint16_t(p[0]) << 8 | uint16_t(p[1]); }
uint32_t le32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}
uint16_t le16(const unsigned char* p) { return uint16_t(p[0]) | uint16_t(p[1]) << 8; }

// ---- PNG -------------------------------------------------------------------

const unsigned char kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

std::vector<unsigned char> zlib_inflate(const unsigned char* data, size_t size,
                                        size_t expected_size, const std::string& origin) {
  std::vector<unsigned char> out(expected_size);
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) corrupt(origin, "inflate initialization failed");
  zs.next_in = const_cast<Bytef*>(data);
  zs.avail_in = uInt(size);
  zs.next_out = out.data();
  zs.avail_out = uInt(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const size_t produced = out.size() - zs.avail_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != expected_size)
    corrupt(origin, "compressed pixel data is truncated or damaged");
  return out;
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

ImageF decode_png(const unsigned char* data, size_t size, const std::string& origin) {
  if (size < 8 || std::memcmp(data, kPngSignature, 8) != 0) corrupt(origin, "bad PNG signature");
  size_t pos = 8;
  int64_t w = 0, h = 0;
  int depth = 0, color = -1;
  std::vector<unsigned char> idat;
  std::vector<unsigned char> palette;  // RGB triples
  bool saw_ihdr = false, saw_iend = false;

  while (pos + 8 <= size && !saw_iend) {
    const uint32_t len = be32(data + pos);
    if (pos + 12 + size_t(len) > size) corrupt(origin, "truncated chunk");
    const char* type = reinterpret_cast<const char*>(data + pos + 4);
    const unsigned char* body = data + pos + 8;
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, data + pos + 4, len + 4);
    if (uint32_t(crc) != be32(body + len)) corrupt(origin, "chunk checksum mismatch");

    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) corrupt(origin, "malformed IHDR");
      w = be32(body);
      h = be32(body + 4);
      depth = body[8];
      color = body[9];
      if (w < 1 || h < 1) corrupt(origin, "non-positive dimensions");
      if (body[10] != 0 || body[11] != 0) corrupt(origin, "unsupported compression/filter method");
      if (body[12] != 0) throw DataError("unsupported image '" + origin + "': interlaced PNG");
      if (depth != 8 && depth != 16)
        throw DataError("unsupported image '" + origin + "': PNG bit depth " +
                        std::to_string(depth) + " (only 8 and 16 supported)");
      if (color != 0 && color != 2 && color != 3 && color != 4 && color != 6)
        corrupt(origin, "unknown PNG color type");
      if (color == 3 && depth != 8)
        throw DataError("unsupported image '" + origin + "': 16-bit palette PNG");
      saw_ihdr = true;
    } else if (std::memcmp(type, "PLTE", 4) == 0) {
      if (len % 3) corrupt(origin, "malformed palette");
      palette.assign(body, body + len);
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), body, body + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  if (!saw_ihdr) corrupt(origin, "missing IHDR");
  if (!saw_iend) corrupt(origin, "missing IEND (file truncated)");
  if (idat.empty()) corrupt(origin, "missing pixel data");
  if (color == 3 && palette.empty()) corrupt(origin, "palette PNG without PLTE");

  const int nch = color == 0 ? 1 : color == 2 ? 3 : color == 3 ? 1 : color == 4 ? 2 : 4;
  const int bpp = nch * depth / 8;                 // filter unit, bytes
  const size_t rowbytes = size_t(w) * size_t(bpp);  // depth >= 8, so exact
  std::vector<unsigned char> raw =
      zlib_inflate(idat.data(), idat.size(), size_t(h) * (rowbytes + 1), origin);

  // Defilter in place, row by row.
  std::vector<unsigned char> prev(rowbytes, 0);
  std::vector<unsigned char> cur(rowbytes);
  const int out_c = color == 0 || color == 4 ? 1 : 3;
  ImageF img;
  img.h = h;
  img.w = w;
  img.c = out_c;
  img.v.resize(size_t(h) * size_t(w) * size_t(out_c));
  const float scale = depth == 8 ? 1.0f / 255.0f : 1.0f / 65535.0f;

  for (int64_t y = 0; y < h; ++y) {
    const unsigned char* row = raw.data() + size_t(y) * (rowbytes + 1);
    const int filter = row[0];
    if (filter > 4) corrupt(origin, "unknown scanline filter");
    for (size_t i = 0; i < rowbytes; ++i) {
      const int x = row[1 + i];
      const int a = i >= size_t(bpp) ? cur[i - bpp] : 0;
      const int b = prev[i];
      const int c = i >= size_t(bpp) ? prev[i - bpp] : 0;
      int v = x;
      switch (filter) {
        case 1: v = x + a; break;
        case 2: v = x + b; break;
        case 3: v = x + (a + b) / 2; break;
        case 4: v = x + paeth(a, b, c); break;
        default: break;
      }
      cur[i] = (unsigned char)(v & 0xff);
    }
    for (int64_t x = 0; x < w; ++x) {
      if (color == 3) {
        const unsigned idx = cur[size_t(x)];
        if (size_t(idx) * 3 + 2 >= palette.size()) corrupt(origin, "palette index out of range");
        for (int ch = 0; ch < 3; ++ch)
          img.at(y, x, ch) = float(palette[size_t(idx) * 3 + size_t(ch)]) / 255.0f;
        continue;
      }
      for (int ch = 0; ch < out_c; ++ch) {
        const size_t off = (size_t(x) * size_t(nch) + size_t(ch)) * size_t(depth / 8);
        const unsigned sample = depth == 8 ? cur[off] : be16(cur.data() + off);
        img.at(y, x, ch) = float(sample) * scale;
      }
    }
    std::swap(prev, cur);
  }
  return img;
}

// ---- PGM / PPM -------------------------------------------------------------

// Reads the next whitespace/comment-delimited token of a netpbm header.
bool pnm_token(const unsigned char* data, size_t size, size_t& pos, std::string& tok) {
  tok.clear();
  while (pos < size) {
    if (data[pos] == '#') {
      while (pos < size && data[pos] != '\n') ++pos;
    } else if (std::isspace(data[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  while (pos < size && !std::isspace(data[pos]) && data[pos] != '#') tok.push_back(char(data[pos++]));
  return !tok.empty();
}

ImageF decode_pnm(const unsigned char* data, size_t size, const std::string& origin) {
  const bool color = data[1] == '6';
  size_t pos = 2;
  std::string tok;
  int64_t dims[3];  // w, h, maxval
  for (int i = 0; i < 3; ++i) {
    if (!pnm_token(data, size, pos, tok)) corrupt(origin, "truncated netpbm header");
    try {
      dims[i] = std::stoll(tok);
    } catch (...) {
      corrupt(origin, "malformed netpbm header token '" + tok + "'");
    }
  }
  const int64_t w = dims[0], h = dims[1], maxval = dims[2];
  if (w < 1 || h < 1) corrupt(origin, "non-positive dimensions");
  if (maxval < 1 || maxval > 65535) corrupt(origin, "netpbm maxval out of range");
  if (pos >= size || !std::isspace(data[pos])) corrupt(origin, "missing header terminator");
  ++pos;  // single whitespace separates header from binary samples

  const int nch = color ? 3 : 1;
  const int bytes = maxval > 255 ? 2 : 1;
  const size_t need = size_t(h) * size_t(w) * size_t(nch) * size_t(bytes);
  if (size - pos < need) corrupt(origin, "pixel data truncated");

  ImageF img;
  img.h = h;
  img.w = w;
  img.c = nch;
  img.v.resize(size_t(h) * size_t(w) * size_t(nch));
  const float scale = 1.0f / float(maxval);
  for (size_t i = 0; i < img.v.size(); ++i) {
    const unsigned sample = bytes == 1 ? data[pos + i] : be16(data + pos + 2 * i);
    if (int64_t(sample) > maxval) corrupt(origin, "sample exceeds declared maxval");
    img.v[i] = float(sample) * scale;
  }
  return img;
}

// ---- BMP -------------------------------------------------------------------

ImageF decode_bmp(const unsigned char* data, size_t size, const std::string& origin) {
  if (size < 54) corrupt(origin, "BMP header truncated");
  const uint32_t pixel_offset = le32(data + 10);
  const uint32_t header_size = le32(data + 14);
  if (header_size < 40) throw DataError("unsupported image '" + origin + "': BMP core header");
  const int32_t w = int32_t(le32(data + 18));
  const int32_t h_raw = int32_t(le32(data + 22));
  const uint16_t bpp = le16(data + 28);
  const uint32_t compression = le32(data + 30);
  if (w < 1 || h_raw == 0) corrupt(origin, "non-positive dimensions");
  if (compression != 0)
    throw DataError("unsupported image '" + origin + "': compressed BMP");
  if (bpp != 8 && bpp != 24 && bpp != 32)
    throw DataError("unsupported image '" + origin + "': BMP bit depth " + std::to_string(bpp));
  const bool top_down = h_raw < 0;
  const int64_t h = top_down ? -int64_t(h_raw) : int64_t(h_raw);

  const unsigned char* pal = nullptr;
  uint32_t pal_entries = 0;
  if (bpp == 8) {
    pal_entries = le32(data + 46);
    if (pal_entries == 0) pal_entries = 256;
    pal = data + 14 + header_size;
    if (14 + size_t(header_size) + size_t(pal_entries) * 4 > size)
      corrupt(origin, "palette truncated");
  }

  const size_t row_stride = (size_t(w) * (bpp / 8) + 3) / 4 * 4;
  if (size_t(pixel_offset) + row_stride * size_t(h) > size) corrupt(origin, "pixel data truncated");

  const int out_c = bpp == 8 ? 3 : 3;
  ImageF img;
  img.h = h;
  img.w = w;
  img.c = out_c;
  img.v.resize(size_t(h) * size_t(w) * size_t(out_c));
  for (int64_t y = 0; y < h; ++y) {
    const int64_t src_y = top_down ? y : h - 1 - y;
    const unsigned char* row = data + pixel_offset + size_t(src_y) * row_stride;
    for (int64_t x = 0; x < w; ++x) {
      if (bpp == 8) {
        const unsigned idx = row[x];
        if (idx >= pal_entries) corrupt(origin, "palette index out of range");
        const unsigned char* e = pal + size_t(idx) * 4;  // BGRA entries
        img.at(y, x, 0) = float(e[2]) / 255.0f;
        img.at(y, x, 1) = float(e[1]) / 255.0f;
        img.at(y, x, 2) = float(e[0]) / 255.0f;
      } else {
        const unsigned char* p = row + size_t(x) * (bpp / 8);
        img.at(y, x, 0) = float(p[2]) / 255.0f;
        img.at(y, x, 1) = float(p[1]) / 255.0f;
        img.at(y, x, 2) = float(p[0]) / 255.0f;
      }
    }
  }
  return img;
}

}  // namespace

ImageF decode_image_bytes(const unsigned char* data, size_t size, const std::string& origin) {
  if (size >= 8 && std::memcmp(data, kPngSignature, 8) == 0) return decode_png(data, size, origin);
  if (size >= 2 && data[0] == 'P' && (data[1] == '5' || data[1] == '6'))
    return decode_pnm(data, size, origin);
  if (size >= 2 && data[0] == 'B' && data[1] == 'M') return decode_bmp(data, size, origin);
  throw DataError("unsupported image format in '" + origin +
                  "' (PNG, binary PGM/PPM, and BMP are supported)");
}

ImageF decode_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image file '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  if (bytes.empty()) throw DataError("image file '" + path + "' is empty");
  return decode_image_bytes(bytes.data(), bytes.size(), path);
}

// ---- PNG writers -----------------------------------------------------------

namespace {

void put_be32(std::string& s, uint32_t v) {
  s.push_back(char(v >> 24));
  s.push_back(char(v >> 16 & 0xff));
  s.push_back(char(v >> 8 & 0xff));
  s.push_back(char(v & 0xff));
}

void append_chunk(std::string& out, const char type[4], const std::string& body) {
  put_be32(out, uint32_t(body.size()));
  out.append(type, 4);
  out.append(body);
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(body.data()), uInt(body.size()));
  put_be32(out, uint32_t(crc));
}

void write_png(const std::string& path, int64_t h, int64_t w, int color_type, int depth,
               const std::vector<unsigned char>& scanline_bytes) {
  const int nch = color_type == 2 ? 3 : 1;
  const size_t rowbytes = size_t(w) * size_t(nch) * size_t(depth / 8);
  std::vector<unsigned char> raw(size_t(h) * (rowbytes + 1));
  for (int64_t y = 0; y < h; ++y) {
    raw[size_t(y) * (rowbytes + 1)] = 0;  // filter: none
    std::memcpy(raw.data() + size_t(y) * (rowbytes + 1) + 1,
                scanline_bytes.data() + size_t(y) * rowbytes, rowbytes);
  }
  uLongf bound = compressBound(uLong(raw.size()));
  std::vector<unsigned char> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK)
    throw IoError("PNG compression failed for '" + path + "'");
  compressed.resize(bound);

  std::string out(reinterpret_cast<const char*>(kPngSignature), 8);
  std::string ihdr;
  put_be32(ihdr, uint32_t(w));
  put_be32(ihdr, uint32_t(h));
  ihdr.push_back(char(depth));
  ihdr.push_back(char(color_type));
  ihdr.append(3, '\0');  // compression, filter, interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT",
               std::string(reinterpret_cast<const char*>(compressed.data()), compressed.size()));
  append_chunk(out, "IEND", "");

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(out.data(), std::streamsize(out.size()));
  if (!os) throw IoError("failed while writing '" + path + "'");
}

}  // namespace

void write_png_gray8(const std::string& path, int64_t h, int64_t w, const uint8_t* data) {
  std::vector<unsigned char> bytes(data, data + size_t(h) * size_t(w));
  write_png(path, h, w, 0, 8, bytes);
}

void write_png_gray16(const std::string& path, int64_t h, int64_t w, const uint16_t* data) {
  std::vector<unsigned char> bytes(size_t(h) * size_t(w) * 2);
  for (size_t i = 0; i < size_t(h) * size_t(w); ++i) {
    bytes[2 * i] = (unsigned char)(data[i] >> 8);
    bytes[2 * i + 1] = (unsigned char)(data[i] & 0xff);
  }
  write_png(path, h, w, 0, 16, bytes);
}

void write_png_rgb8(const std::string& path, int64_t h, int64_t w, const uint8_t* rgb) {
  std::vector<unsigned char> bytes(rgb, rgb + size_t(h) * size_t(w) * 3);
  write_png(path, h, w, 2, 8, bytes);
}

}  // namespace mkis

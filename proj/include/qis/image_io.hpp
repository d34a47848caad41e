#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <png.h>

#include "qis/error.hpp"
#include "qis/grid.hpp"

namespace qis {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io_error, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io_error, "short write to " + path);
}

namespace detail {

inline bool looks_like_png(const std::string& bytes) {
  return bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0;
}

inline ScalarField decode_png(const std::string& bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw Error(ErrorCode::parse_error, std::string("invalid PNG: ") + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::parse_error, "invalid PNG: " + msg);
  }
  const int h = static_cast<int>(image.height);
  const int w = static_cast<int>(image.width);
  if (h == 0 || w == 0) throw Error(ErrorCode::empty_image, "PNG has no pixels");
  ScalarField out(h, w);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (color) {
      out[i] = 0.299 * buf[3 * i] + 0.587 * buf[3 * i + 1] + 0.114 * buf[3 * i + 2];
    } else {
      out[i] = buf[i];
    }
  }
  return out;
}

struct PgmHeader {
  long width = 0;
  long height = 0;
  long maxval = 0;
  std::size_t raster = 0;  // byte offset of the first sample
};

inline PgmHeader parse_pgm_header(const std::string& bytes) {
  std::size_t pos = 2;
  auto next_token = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
      if (v > 1'000'000) throw Error(ErrorCode::parse_error, "PGM header value too large");
    }
    if (!any) throw Error(ErrorCode::parse_error, "malformed PGM header");
    return v;
  };
  PgmHeader hdr;
  hdr.width = next_token();
  hdr.height = next_token();
  hdr.maxval = next_token();
  hdr.raster = pos + 1;  // single whitespace before the raster
  return hdr;
}

// Binary PGM (P5), maxval up to 65535.
inline ScalarField decode_pgm(const std::string& bytes) {
  const PgmHeader hdr = parse_pgm_header(bytes);
  const long w = hdr.width;
  const long h = hdr.height;
  const long maxval = hdr.maxval;
  const std::size_t pos = hdr.raster;
  if (w <= 0 || h <= 0) throw Error(ErrorCode::empty_image, "PGM has no pixels");
  if (maxval <= 0 || maxval > 65535) throw Error(ErrorCode::parse_error, "PGM maxval out of range");
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * bpp;
  if (bytes.size() < pos + need) throw Error(ErrorCode::parse_error, "truncated PGM raster");
  ScalarField out(static_cast<int>(h), static_cast<int>(w));
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = bpp == 1 ? p[i] : double((p[2 * i] << 8) | p[2 * i + 1]);
  }
  return out;
}

inline std::string encode_png(int height, int width, const std::uint8_t* data, bool rgb) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, data, 0, nullptr)) {
    throw Error(ErrorCode::io_error, std::string("PNG encode failed: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, data, 0, nullptr)) {
    throw Error(ErrorCode::io_error, std::string("PNG encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

}  // namespace detail

// Raw intensities (0..255 for 8-bit input), before rescaling.
inline ScalarField decode_image(const std::string& bytes) {
  if (detail::looks_like_png(bytes)) return detail::decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return detail::decode_pgm(bytes);
  throw Error(ErrorCode::parse_error, "unsupported image format (expected PNG or binary PGM)");
}

// Height and width from the header alone, so oversized uploads can be
// refused before decoding.
inline std::pair<long, long> image_dimensions(const std::string& bytes) {
  if (detail::looks_like_png(bytes)) {
    if (bytes.size() < 24 || bytes.compare(12, 4, "IHDR") != 0) throw Error(ErrorCode::parse_error, "PNG lacks IHDR");
    auto be32 = [&](std::size_t at) {
      long v = 0;
      for (std::size_t k = 0; k < 4; ++k) v = (v << 8) | static_cast<unsigned char>(bytes[at + k]);
      return v;
    };
    return {be32(20), be32(16)};
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') {
    const detail::PgmHeader hdr = detail::parse_pgm_header(bytes);
    return {hdr.height, hdr.width};
  }
  throw Error(ErrorCode::parse_error, "unsupported image format (expected PNG or binary PGM)");
}

inline ScalarField load_image(const std::string& path) { return decode_image(read_file(path)); }

// Nonzero pixels are foreground; {0, 255} files map to {0, 1}.
inline BinaryMask decode_mask(const std::string& bytes) {
  const ScalarField raw = decode_image(bytes);
  BinaryMask out(raw.height(), raw.width());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] >= 127.5 ? 1 : 0;
  return out;
}

inline BinaryMask load_mask(const std::string& path) { return decode_mask(read_file(path)); }

inline std::string encode_mask_png(const BinaryMask& m) {
  std::vector<std::uint8_t> px(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) px[i] = m[i] ? 255 : 0;
  return detail::encode_png(m.height(), m.width(), px.data(), false);
}

// Values are rounded and clamped to 0..255.
inline std::string encode_gray_png(const ScalarField& f) {
  std::vector<std::uint8_t> px(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::clamp(std::lround(f[i]), 0L, 255L));
  }
  return detail::encode_png(f.height(), f.width(), px.data(), false);
}

inline std::string encode_rgb_png(int height, int width, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) {
    throw Error(ErrorCode::dimension_mismatch, "RGB buffer size does not match dimensions");
  }
  return detail::encode_png(height, width, rgb.data(), true);
}

}  // namespace qis

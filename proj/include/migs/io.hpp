#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "migs/errors.hpp"
#include "migs/tensor.hpp"

namespace migs {

inline std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f),
                                    std::istreambuf_iterator<char>());
}

inline void write_bytes(const std::string& path, const unsigned char* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!f) throw IoError("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  const std::vector<unsigned char> b = read_bytes(path);
  return std::string(b.begin(), b.end());
}

inline void write_text_file(const std::string& path, const std::string& text) {
  write_bytes(path, reinterpret_cast<const unsigned char*>(text.data()), text.size());
}

// ---------------------------------------------------------------------------
// Minimal PNG codec: 8-bit RGB, non-interlaced. Writing always uses filter
// type None on every scanline so output bytes depend only on the pixels and
// the zlib build; reading understands all five standard filters.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline std::uint32_t get_u32_be(const unsigned char* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void put_chunk(std::vector<unsigned char>& out, const char type[4],
                      const std::vector<unsigned char>& data) {
  put_u32_be(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t type_at = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, out.data() + type_at, static_cast<uInt>(4 + data.size())));
  put_u32_be(out, crc);
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace detail

// Encodes an [H,W,3] image with values in [0,1] (clamped, rounded to 8 bits).
inline std::vector<unsigned char> encode_png_rgb8(const Tensor<float>& image) {
  if (image.ndim() != 3 || image.dim(2) != 3 || image.dim(0) < 1 || image.dim(1) < 1)
    throw ContractError("encode_png_rgb8: image must be [H,W,3]");
  const int H = image.dim(0), W = image.dim(1);
  const std::size_t stride = static_cast<std::size_t>(W) * 3 + 1;
  std::vector<unsigned char> raw(stride * static_cast<std::size_t>(H));
  for (int y = 0; y < H; ++y) {
    unsigned char* row = raw.data() + stride * static_cast<std::size_t>(y);
    row[0] = 0;  // filter: None
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = image.at(y, x, c);
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        row[1 + x * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  }

  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png: deflate failed");
  comp.resize(comp_len);

  std::vector<unsigned char> out{137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<unsigned char> ihdr;
  detail::put_u32_be(ihdr, static_cast<std::uint32_t>(W));
  detail::put_u32_be(ihdr, static_cast<std::uint32_t>(H));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  detail::put_chunk(out, "IHDR", ihdr);
  detail::put_chunk(out, "IDAT", comp);
  detail::put_chunk(out, "IEND", {});
  return out;
}

inline Tensor<float> decode_png_rgb8(const std::vector<unsigned char>& bytes) {
  static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw IoError("png: bad signature");
  std::size_t at = 8;
  int W = 0, H = 0;
  bool saw_ihdr = false;
  std::vector<unsigned char> idat;
  while (at + 12 <= bytes.size()) {
    const std::uint32_t len = detail::get_u32_be(bytes.data() + at);
    if (at + 12 + len > bytes.size()) throw IoError("png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + at + 4);
    const unsigned char* data = bytes.data() + at + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw IoError("png: bad IHDR");
      W = static_cast<int>(detail::get_u32_be(data));
      H = static_cast<int>(detail::get_u32_be(data + 4));
      if (data[8] != 8 || data[9] != 2 || data[12] != 0)
        throw IoError("png: only 8-bit non-interlaced RGB is supported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    at += 12 + len;
  }
  if (!saw_ihdr || W < 1 || H < 1) throw IoError("png: missing IHDR");

  const std::size_t stride = static_cast<std::size_t>(W) * 3 + 1;
  std::vector<unsigned char> raw(stride * static_cast<std::size_t>(H));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw IoError("png: inflate failed");

  const int bpp = 3;
  for (int y = 0; y < H; ++y) {
    unsigned char* row = raw.data() + stride * static_cast<std::size_t>(y);
    const unsigned char* prev =
        y > 0 ? raw.data() + stride * static_cast<std::size_t>(y - 1) : nullptr;
    const unsigned char filter = row[0];
    unsigned char* px = row + 1;
    const unsigned char* up = prev ? prev + 1 : nullptr;
    const int nb = W * 3;
    for (int i = 0; i < nb; ++i) {
      const int a = i >= bpp ? px[i - bpp] : 0;
      const int b = up ? up[i] : 0;
      const int cdiag = (up && i >= bpp) ? up[i - bpp] : 0;
      int v = px[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, cdiag); break;
        default: throw IoError("png: unknown filter type");
      }
      px[i] = static_cast<unsigned char>(v & 0xff);
    }
  }

  Tensor<float> image({H, W, 3});
  for (int y = 0; y < H; ++y) {
    const unsigned char* px = raw.data() + stride * static_cast<std::size_t>(y) + 1;
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        image.at(y, x, c) = static_cast<float>(px[x * 3 + c]) / 255.0f;
  }
  return image;
}

inline void write_png_rgb8(const std::string& path, const Tensor<float>& image) {
  const std::vector<unsigned char> bytes = encode_png_rgb8(image);
  write_bytes(path, bytes.data(), bytes.size());
}

inline Tensor<float> read_png_rgb8(const std::string& path) {
  try {
    return decode_png_rgb8(read_bytes(path));
  } catch (const IoError& e) {
    throw IoError(std::string(e.what()) + " [" + path + "]");
  }
}

}  // namespace migs
